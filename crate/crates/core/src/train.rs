//! Maximum-likelihood fitting of the gates.

use alloc::boxed::Box;
use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::corpus::{split_dataset, Dataset, Example};
use crate::embed::Embedder;
use crate::gating::{
    grad_objective, mixture_loglik, rho_for_tau, Agents, ExemplarText, GateState, GatingParams, MaskRule, Observation,
    Projected, TAU_INIT, TAU_MIN,
};
use crate::lm::LanguageModel;
use crate::math::Matrix;
use crate::optim::{Adam, AdamConfig};
use crate::rng;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub m: usize,
    pub d: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub mask: MaskRule,
    pub heldout_fraction: f64,
    pub exemplar_text: ExemplarText,
    /// Starting temperature of every persona.
    pub tau_init: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            m: 4,
            d: 128,
            batch_size: 32,
            adam: AdamConfig::default(),
            max_epochs: 20,
            patience: 5,
            seed: 0,
            mask: MaskRule::ExcludeSelf,
            heldout_fraction: 0.1,
            exemplar_text: ExemplarText::Response,
            tau_init: TAU_INIT,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::validation(m));
        if self.m == 0 {
            return bad("M must be at least 1");
        }
        if self.d == 0 {
            return bad("gate dimension d must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch size must be positive");
        }
        if !(self.adam.lr > 0.0) || !self.adam.lr.is_finite() {
            return bad("step size must be positive");
        }
        if !(self.heldout_fraction > 0.0 && self.heldout_fraction < 1.0) {
            return bad("heldout fraction must lie in (0, 1)");
        }
        if !(self.tau_init > TAU_MIN) || !self.tau_init.is_finite() {
            return bad("initial temperature must exceed the temperature floor");
        }
        self.mask.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    /// 0 is the untrained initialization.
    pub epoch: usize,
    pub train_loglik: Option<f64>,
    pub heldout_loglik: f64,
    pub tau_min: f64,
    pub tau_mean: f64,
    pub tau_max: f64,
    pub score_calls: u64,
    pub cache_hits: u64,
    /// Seconds since training started, from the caller's clock. Not
    /// serialized, so reports stay reproducible.
    #[serde(skip)]
    pub wall_time_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_heldout_loglik: f64,
    pub stopped_early: bool,
}

impl TrainLog {
    pub fn initial(&self) -> &EpochLog {
        &self.epochs[0]
    }
}

/// Records paired with their context embeddings.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub examples: Vec<Example>,
    pub x: Matrix,
}

impl Prepared {
    /// Embeds each distinct context once.
    pub fn new<E: Embedder + ?Sized>(embedder: &E, examples: Vec<Example>) -> Result<Self> {
        let mut index: BTreeMap<&str, usize> = BTreeMap::new();
        let mut uniq: Vec<&str> = Vec::new();
        for e in &examples {
            index.entry(e.context.as_str()).or_insert_with(|| {
                uniq.push(e.context.as_str());
                uniq.len() - 1
            });
        }
        let emb = embedder.embed_batch(&uniq)?;
        let mut x = Matrix::zeros(examples.len(), embedder.dim());
        for (i, e) in examples.iter().enumerate() {
            x.row_mut(i).copy_from_slice(emb.row(index[e.context.as_str()]));
        }
        Ok(Prepared { examples, x })
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn observation(&self, i: usize, mask: Option<usize>) -> Observation<'_> {
        Observation {
            example: &self.examples[i],
            x_raw: self.x.row(i),
            mask,
        }
    }
}

/// Mean top-M log-likelihood per record. Records that also sit in the pool
/// are still excluded from their own slot.
pub fn evaluate_heldout<L: LanguageModel + ?Sized>(
    params: &GatingParams,
    state: &GateState,
    agents: Agents<'_, L>,
    heldout: &Prepared,
    m: usize,
) -> Result<f64> {
    if heldout.is_empty() {
        return Err(Error::validation("heldout set is empty"));
    }
    let proj = Projected::new(params, state)?;
    let mut total = 0.0;
    for i in 0..heldout.len() {
        let mask = MaskRule::ExcludeSelf.mask_for(agents.pool, &heldout.examples[i].id, 0);
        total += mixture_loglik(&heldout.observation(i, mask), params, &proj, agents, m)?;
    }
    Ok(total / heldout.len() as f64)
}

/// Optional callbacks around the loop.
#[derive(Default)]
pub struct Hooks<'h> {
    /// Seconds from an arbitrary origin.
    pub clock: Option<Box<dyn Fn() -> f64 + 'h>>,
    /// Called after every epoch with the log entry, the current parameters
    /// and whether they are the new best.
    pub on_epoch: Option<Box<dyn FnMut(&EpochLog, &GatingParams, bool) -> Result<()> + 'h>>,
}

/// Splits `dataset` by `config.heldout_fraction` and trains.
pub fn train<L, E>(
    dataset: &Dataset,
    state: &GateState,
    agents: Agents<'_, L>,
    embedder: &E,
    config: &TrainConfig,
    hooks: Hooks<'_>,
) -> Result<(GatingParams, TrainLog)>
where
    L: LanguageModel + ?Sized,
    E: Embedder + ?Sized,
{
    config.validate()?;
    let (tr, ho) = split_dataset(dataset, config.heldout_fraction, rng::derive_seed(config.seed, 0x5eed))?;
    let tr = Prepared::new(embedder, tr.training_view())?;
    let ho = Prepared::new(embedder, ho.training_view())?;
    train_prepared(&tr, &ho, state, agents, config, hooks)
}

pub fn train_prepared<L: LanguageModel + ?Sized>(
    train_set: &Prepared,
    heldout: &Prepared,
    state: &GateState,
    agents: Agents<'_, L>,
    config: &TrainConfig,
    mut hooks: Hooks<'_>,
) -> Result<(GatingParams, TrainLog)> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(Error::validation("training set is empty"));
    }
    if agents.personas.is_empty() {
        return Err(Error::validation("no personas"));
    }
    if agents.personas.len() != state.k() || agents.pool.len() != state.n() {
        return Err(Error::validation("gate state does not match personas and pool"));
    }
    let now = |h: &Hooks<'_>| h.clock.as_ref().map_or(0.0, |c| c());
    let t0 = now(&hooks);

    let mut params = GatingParams::init(state.k(), config.d, state.d_in(), rng::derive_seed(config.seed, 1));
    params.rho.iter_mut().for_each(|r| *r = rho_for_tau(config.tau_init));
    let mut opt = Adam::new(config.adam, &params);
    let entry = |epoch, train_ll, held, p: &GatingParams, t: f64| {
        let taus = p.taus();
        let stats = agents.backend.call_stats();
        EpochLog {
            epoch,
            train_loglik: train_ll,
            heldout_loglik: held,
            tau_min: taus.iter().copied().fold(f64::INFINITY, f64::min),
            tau_mean: taus.iter().sum::<f64>() / taus.len() as f64,
            tau_max: taus.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            score_calls: stats.score_calls,
            cache_hits: stats.cache_hits,
            wall_time_s: t,
        }
    };

    let h0 = evaluate_heldout(&params, state, agents, heldout, config.m)?;
    let e0 = entry(0, None, h0, &params, now(&hooks) - t0);
    log::info!("epoch 0: heldout {:.4}", h0);
    if let Some(cb) = hooks.on_epoch.as_mut() {
        cb(&e0, &params, true)?;
    }
    let mut log = TrainLog {
        epochs: alloc::vec![e0],
        best_epoch: 0,
        best_heldout_loglik: h0,
        stopped_early: false,
    };
    let mut best = params.clone();
    let mut stale = 0;
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    for epoch in 1..=config.max_epochs {
        let salt = rng::derive_seed(config.seed, 1000 + epoch as u64);
        order.shuffle(&mut rng::rng_from(salt));
        let mut total = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<Observation<'_>> = chunk
                .iter()
                .map(|&i| {
                    let mask = config.mask.mask_for(agents.pool, &train_set.examples[i].id, salt);
                    train_set.observation(i, mask)
                })
                .collect();
            let (loss, grad) = grad_objective(&batch, &params, state, agents, config.m)?;
            if !loss.is_finite() {
                return Err(Error::Numerical {
                    record: batch[0].example.id.clone(),
                    what: format!("loss in epoch {epoch}"),
                });
            }
            total -= loss * chunk.len() as f64;
            opt.step(&mut params, &grad);
        }
        let held = evaluate_heldout(&params, state, agents, heldout, config.m)?;
        let improved = held > log.best_heldout_loglik;
        let e = entry(epoch, Some(total / train_set.len() as f64), held, &params, now(&hooks) - t0);
        log::info!(
            "epoch {epoch}: train {:.4} heldout {held:.4} tau [{:.3}, {:.3}] ({:.1}s)",
            total / train_set.len() as f64,
            e.tau_min,
            e.tau_max,
            e.wall_time_s
        );
        if let Some(cb) = hooks.on_epoch.as_mut() {
            cb(&e, &params, improved)?;
        }
        log.epochs.push(e);
        if improved {
            log.best_epoch = epoch;
            log.best_heldout_loglik = held;
            best = params.clone();
            stale = 0;
        } else {
            stale += 1;
            if stale >= config.patience {
                log.stopped_early = true;
                break;
            }
        }
    }
    Ok((best, log))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let c = TrainConfig { m: 0, ..Default::default() };
        assert!(c.validate().is_err());
        let mut c = TrainConfig::default();
        c.adam.lr = 0.0;
        assert!(c.validate().is_err());
        let c: TrainConfig = serde_json::from_str(r#"{"m": 2}"#).unwrap();
        assert_eq!((c.m, c.d, c.batch_size), (2, 128, 32));
        assert!(serde_json::from_str::<TrainConfig>(r#"{"bogus": 1}"#).is_err());
    }
}
