//! Unsupervised training loop and single-pair registration.

use alloc::collections::VecDeque;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::deform::{DisplacementField, VolumeImage};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::loss::{total_loss, LossConfig, RegistrationMode};
use crate::model::{ModelConfig, SymTrans};
use crate::optim::{adam_step, AdamConfig, AdamState};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::synth::{generate_pair, SyntheticPair, SyntheticSpec};
use crate::tensor::Tensor;

/// Stream offset separating parameter initialisation from the data stream.
const INIT_STREAM: u64 = u64::MAX;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub optimizer: AdamConfig,
    pub data: SyntheticSpec,
    pub iterations: u64,
    pub seed: u64,
    /// Write a checkpoint every this many iterations; 0 only writes the final one.
    pub checkpoint_every: u64,
    /// Moving-average window of the divergence tripwire.
    pub divergence_window: usize,
    /// Abort once the moving average exceeds this multiple of its minimum.
    pub divergence_factor: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::desk(),
            loss: LossConfig::default(),
            optimizer: AdamConfig::default(),
            data: SyntheticSpec::default(),
            iterations: 200,
            seed: 0,
            checkpoint_every: 0,
            divergence_window: 50,
            divergence_factor: 2.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let nest = |prefix: &str, e: Error| match e {
            Error::InvalidConfig { field, reason } => Error::InvalidConfig {
                field: format!("{}.{}", prefix, field),
                reason,
            },
            other => other,
        };
        self.model.validate().map_err(|e| nest("model", e))?;
        self.loss.validate().map_err(|e| nest("loss", e))?;
        self.optimizer.validate().map_err(|e| nest("optimizer", e))?;
        self.data.validate().map_err(|e| nest("data", e))?;
        if self.data.extents != self.model.input_shape {
            return Err(Error::config(
                "data.extents",
                format!("{:?} differs from model.input_shape {:?}", self.data.extents, self.model.input_shape),
            ));
        }
        if self.divergence_window == 0 {
            return Err(Error::config("divergence_window", "must be positive"));
        }
        if !(self.divergence_factor > 1.0) {
            return Err(Error::config("divergence_factor", "must be > 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainState<S> {
    pub params: ParamStore<S>,
    pub adam: AdamState<S>,
}

impl<S: Scalar> TrainState<S> {
    pub fn step(&self) -> u64 {
        self.adam.step
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    /// 1-based iteration.
    pub iteration: u64,
    pub loss: f64,
    pub loss_sim: f64,
    pub loss_reg: f64,
    pub grad_norm: f64,
}

/// Non-finite losses or a moving average exceeding `factor ×` its running minimum.
#[derive(Clone, Debug)]
pub struct DivergenceMonitor {
    window: usize,
    factor: f64,
    recent: VecDeque<f64>,
    min_avg: f64,
}

impl DivergenceMonitor {
    pub fn new(window: usize, factor: f64) -> Self {
        Self {
            window,
            factor,
            recent: VecDeque::with_capacity(window + 1),
            min_avg: f64::INFINITY,
        }
    }

    /// Records a loss and returns a reason if training should stop.
    pub fn observe(&mut self, loss: f64) -> Option<String> {
        if !loss.is_finite() {
            return Some(String::from("non-finite loss"));
        }
        self.recent.push_back(loss);
        if self.recent.len() > self.window {
            self.recent.pop_front();
        }
        if self.recent.len() < self.window {
            return None;
        }
        let avg = self.recent.iter().sum::<f64>() / self.window as f64;
        self.min_avg = self.min_avg.min(avg);
        if avg > self.factor * self.min_avg {
            return Some(format!(
                "{}-iteration moving average {:.6e} exceeds {} x its minimum {:.6e}",
                self.window, avg, self.factor, self.min_avg
            ));
        }
        None
    }
}

/// Moving and fixed volumes cast to the training precision.
pub fn pair_tensors<S: Scalar>(pair: &SyntheticPair) -> (Tensor<S>, Tensor<S>) {
    (pair.moving.tensor().cast(), pair.fixed.tensor().cast())
}

pub struct Trainer<S: Scalar> {
    pub cfg: TrainConfig,
    pub model: SymTrans,
    pub state: TrainState<S>,
    monitor: DivergenceMonitor,
}

impl<S: Scalar> Trainer<S> {
    /// Fresh parameters drawn from `cfg.seed`.
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let model = SymTrans::new(&cfg.model)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(INIT_STREAM);
        let params = model.layout.initialize::<S, _>(&mut rng);
        let adam = AdamState::new(&params);
        Self::from_state(cfg, TrainState { params, adam })
    }

    /// Continues from saved parameters and moments.
    pub fn from_state(cfg: TrainConfig, state: TrainState<S>) -> Result<Self> {
        cfg.validate()?;
        let model = SymTrans::new(&cfg.model)?;
        if !state.params.conforms_to(&model.layout) || !state.adam.conforms_to(&state.params) {
            return Err(Error::invalid("train state", "parameters do not match the model configuration"));
        }
        let monitor = DivergenceMonitor::new(cfg.divergence_window, cfg.divergence_factor);
        Ok(Self {
            cfg,
            model,
            state,
            monitor,
        })
    }

    /// The pair consumed by 0-based iteration `index`.
    pub fn pair(&self, index: u64) -> Result<SyntheticPair> {
        generate_pair(&self.cfg.data, self.cfg.seed, index)
    }

    fn divergence(&self, iteration: u64, loss: f64, sim: f64, reg: f64, reason: String) -> Error {
        Error::Divergence {
            iteration,
            loss,
            loss_sim: sim,
            loss_reg: reg,
            reason,
        }
    }

    /// One optimisation step on a single pair.
    pub fn step_on(&mut self, moving: &Tensor<S>, fixed: &Tensor<S>) -> Result<StepRecord> {
        let iteration = self.state.step() + 1;
        let mut g = Graph::new();
        let p = self.state.params.bind(&mut g);
        let m = g.constant(moving.clone());
        let f = g.constant(fixed.clone());
        let raw = self.model.forward(&mut g, &p, m, f)?;
        let parts = match total_loss(&mut g, m, f, raw, &self.cfg.loss, self.cfg.model.mode) {
            Ok(parts) => parts,
            Err(Error::NonFinite(what)) => {
                return Err(self.divergence(iteration, f64::NAN, f64::NAN, f64::NAN, format!("non-finite {}", what)))
            }
            Err(e) => return Err(e),
        };
        let value = |v: Var| g.value(v).item().map_or(f64::NAN, |x| x.as_f64());
        let (loss, sim, reg) = (value(parts.loss), value(parts.sim), value(parts.reg));
        if let Some(reason) = self.monitor.observe(loss) {
            return Err(self.divergence(iteration, loss, sim, reg, reason));
        }
        g.backward(parts.loss)?;
        let grads: Vec<Tensor<S>> = p
            .iter()
            .map(|&v| g.grad(v).ok_or_else(|| Error::MissingGrad(format!("parameter node {}", v.index()))))
            .collect::<Result<_>>()?;
        let grad_norm = match adam_step(&mut self.state.params, &mut self.state.adam, &grads, &self.cfg.optimizer) {
            Ok(n) => n,
            Err(Error::NonFinite(what)) => return Err(self.divergence(iteration, loss, sim, reg, format!("non-finite {}", what))),
            Err(e) => return Err(e),
        };
        Ok(StepRecord {
            iteration,
            loss,
            loss_sim: sim,
            loss_reg: reg,
            grad_norm,
        })
    }

    /// One step on the stream pair for the current iteration.
    pub fn step(&mut self) -> Result<StepRecord> {
        let pair = self.pair(self.state.step())?;
        let (m, f) = pair_tensors::<S>(&pair);
        self.step_on(&m, &f)
    }

    /// Runs until `cfg.iterations` steps have been taken, calling `on_step` after each.
    pub fn train(&mut self, mut on_step: impl FnMut(&Self, &StepRecord) -> Result<()>) -> Result<Vec<StepRecord>> {
        let mut curve = Vec::new();
        while self.state.step() < self.cfg.iterations {
            let rec = self.step()?;
            on_step(self, &rec)?;
            curve.push(rec);
        }
        Ok(curve)
    }
}

/// Output of registering one pair.
#[derive(Clone, Debug, PartialEq)]
pub struct Registration<S> {
    pub raw_field: Tensor<S>,
    pub displacement: DisplacementField<S>,
    pub warped: VolumeImage<S>,
    pub loss: f64,
    pub loss_sim: f64,
    pub loss_reg: f64,
}

/// Single forward pass, optional integration, warp and loss components.
pub fn register<S: Scalar>(
    model: &SymTrans,
    params: &ParamStore<S>,
    moving: &Tensor<S>,
    fixed: &Tensor<S>,
    mode: RegistrationMode,
    loss_cfg: &LossConfig,
) -> Result<Registration<S>> {
    if !params.conforms_to(&model.layout) {
        return Err(Error::invalid("register", "parameters do not match the model configuration"));
    }
    let mut g = Graph::new();
    let p = params.bind_frozen(&mut g);
    let m = g.constant(moving.clone());
    let f = g.constant(fixed.clone());
    let raw = model.forward(&mut g, &p, m, f)?;
    let parts = total_loss(&mut g, m, f, raw, loss_cfg, mode)?;
    let value = |v: Var| g.value(v).item().map_or(f64::NAN, |x| x.as_f64());
    Ok(Registration {
        raw_field: g.value(raw).clone(),
        displacement: DisplacementField::new(g.value(parts.displacement).clone())?,
        warped: VolumeImage::new(g.value(parts.warped).clone())?,
        loss: value(parts.loss),
        loss_sim: value(parts.sim),
        loss_reg: value(parts.reg),
    })
}
