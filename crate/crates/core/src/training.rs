//! Progressive training: Adam, the per-step update sequence (encoder,
//! generator with refiner, discriminator, code discriminator), the stage
//! schedule, checkpoints and the loss log.
//!
//! Every random draw of step `k` comes from a generator seeded with the run
//! seed on a stream derived from `k`, so a run is a pure function of its
//! configuration and data and can resume from any checkpoint bit-exactly.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use voxgrad::{backward, Tensor, TensorError, Var};

use crate::checkpoint::Checkpoint;
use crate::config::{RunConfig, TrainConfig};
use crate::error::{Error, Result};
use crate::losses::{
    code_discriminator_loss, discriminator_loss, encoder_loss, generator_loss, gradient_penalty_at, neg_log,
    reconstruction_loss,
};
use crate::networks::{NetKind, Network, NetworkConfig};
use crate::params::{Binding, NormMode, ParamSet};
use crate::voxel::{occupancy_weights, one_hot_batch, VoxelScene};

pub const CSV_HEADER: &str = "step,stage,epoch,l_rec,l_gan_g,l_gan_d,l_enc,gp,wdist";

/// Stream offset separating per-step draws from initialization streams.
const STEP_STREAM: u64 = 1 << 63;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn from_train(cfg: &TrainConfig) -> Self {
        AdamConfig { lr: cfg.learning_rate, beta1: cfg.adam_beta1, beta2: cfg.adam_beta2, eps: cfg.adam_eps }
    }
}

/// Step count and first and second moments, keyed by parameter name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub t: u64,
    m: HashMap<String, Tensor>,
    v: HashMap<String, Tensor>,
}

impl AdamState {
    pub fn moments(&self, name: &str) -> Option<(&Tensor, &Tensor)> {
        Some((self.m.get(name)?, self.v.get(name)?))
    }

    /// Drops moments of parameters no longer in `params`.
    pub fn retain(&mut self, params: &ParamSet) {
        let live: Vec<&str> = params.names();
        self.m.retain(|k, _| live.contains(&k.as_str()));
        self.v.retain(|k, _| live.contains(&k.as_str()));
    }
}

/// Bias-corrected Adam update applied in place.
pub fn adam_step(params: &mut ParamSet, grads: &[(String, Tensor)], state: &mut AdamState, cfg: &AdamConfig) -> Result<()> {
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (name, g) in grads {
        let p = params.get_mut(name).ok_or_else(|| Error::Usage(format!("no parameter {name}")))?;
        if p.shape() != g.shape() {
            return Err(Error::Mismatch(format!("gradient {:?} for parameter {name} {:?}", g.shape(), p.shape())));
        }
        let m = state.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
        let v = state.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
        let (m, v) = (m.data_mut(), v.data_mut());
        for (i, (p, &g)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
            *p -= cfg.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + cfg.eps);
        }
    }
    Ok(())
}

/// Gradients of `loss` for every trainable leaf of the given bindings.
fn gradients(loss: &Var, binds: &[&Binding]) -> Result<Vec<(String, Tensor)>> {
    if !loss.value().all_finite() {
        return Err(TensorError::NonFinite { op: "loss" }.into());
    }
    let grads = backward(loss)?;
    let mut out = Vec::new();
    for bind in binds {
        for (name, var) in bind.trainable_vars() {
            let g = grads.get(var).cloned().unwrap_or_else(|| Tensor::zeros(var.shape()));
            out.push((name.to_string(), g));
        }
    }
    Ok(out)
}

/// Stage active at `epoch`: one more stage every `epochs_per_stage` epochs.
pub fn progressive_schedule(epoch: u64, epochs_per_stage: usize, stages: usize) -> usize {
    let stage = 1 + epoch / epochs_per_stage.max(1) as u64;
    stage.min(stages as u64) as usize
}

/// The five networks, always at a common stage.
#[derive(Clone, Debug)]
pub struct Nets {
    pub g: Network,
    pub d: Network,
    pub e: Network,
    pub r: Network,
    pub c: Network,
}

impl Nets {
    pub fn build(config: &NetworkConfig, stage: usize, seed: u64) -> Result<Self> {
        let build = |kind| Network::build(kind, config, stage, seed);
        Ok(Nets {
            g: build(NetKind::Generator)?,
            d: build(NetKind::Discriminator)?,
            e: build(NetKind::Encoder)?,
            r: build(NetKind::Refiner)?,
            c: build(NetKind::CodeDiscriminator)?,
        })
    }

    pub fn stage(&self) -> usize {
        self.g.stage
    }

    pub fn get(&self, kind: NetKind) -> &Network {
        match kind {
            NetKind::Generator => &self.g,
            NetKind::Discriminator => &self.d,
            NetKind::Encoder => &self.e,
            NetKind::Refiner => &self.r,
            NetKind::CodeDiscriminator => &self.c,
        }
    }

    fn get_mut(&mut self, kind: NetKind) -> &mut Network {
        match kind {
            NetKind::Generator => &mut self.g,
            NetKind::Discriminator => &mut self.d,
            NetKind::Encoder => &mut self.e,
            NetKind::Refiner => &mut self.r,
            NetKind::CodeDiscriminator => &mut self.c,
        }
    }

    pub fn grow(&mut self) -> Result<()> {
        for kind in NetKind::ALL {
            self.get_mut(kind).grow()?;
        }
        Ok(())
    }

    /// `R(G(z))` with stored normalization statistics.
    pub fn generate(&self, z: &Tensor) -> Result<Tensor> {
        self.r.eval(&self.g.eval(z)?)
    }

    /// `R(G(E(x)))` with stored normalization statistics.
    pub fn reconstruct(&self, x: &Tensor) -> Result<Tensor> {
        self.r.eval(&self.g.eval(&self.e.eval(x)?)?)
    }

    /// `R(G(E(x)))` standardized with the statistics of `x` itself.
    pub fn reconstruct_batch_stats(&self, x: &Tensor) -> Result<Tensor> {
        let frozen = |n: &Network| n.params.bind(false, NormMode::Train);
        let (be, bg, br) = (frozen(&self.e), frozen(&self.g), frozen(&self.r));
        let z = self.e.forward(&be, &Var::constant(x.clone()))?;
        Ok(self.r.forward(&br, &self.g.forward(&bg, &z)?)?.value().clone())
    }
}

/// One Adam state per network.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamSet {
    pub g: AdamState,
    pub d: AdamState,
    pub e: AdamState,
    pub r: AdamState,
    pub c: AdamState,
}

impl AdamSet {
    pub fn get(&self, kind: NetKind) -> &AdamState {
        match kind {
            NetKind::Generator => &self.g,
            NetKind::Discriminator => &self.d,
            NetKind::Encoder => &self.e,
            NetKind::Refiner => &self.r,
            NetKind::CodeDiscriminator => &self.c,
        }
    }

    fn get_mut(&mut self, kind: NetKind) -> &mut AdamState {
        match kind {
            NetKind::Generator => &mut self.g,
            NetKind::Discriminator => &mut self.d,
            NetKind::Encoder => &mut self.e,
            NetKind::Refiner => &mut self.r,
            NetKind::CodeDiscriminator => &mut self.c,
        }
    }
}

/// Metrics of one step. Adversarial entries are 0 when the adversarial
/// terms are switched off.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRecord {
    pub step: u64,
    pub stage: usize,
    pub epoch: u64,
    pub l_rec: f64,
    pub l_gan_g: f64,
    pub l_gan_d: f64,
    pub l_enc: f64,
    pub gp: f64,
    pub wdist: f64,
}

impl LossRecord {
    pub fn to_row(&self) -> [f64; 9] {
        [
            self.step as f64,
            self.stage as f64,
            self.epoch as f64,
            self.l_rec,
            self.l_gan_g,
            self.l_gan_d,
            self.l_enc,
            self.gp,
            self.wdist,
        ]
    }

    pub fn from_row(r: &[f64]) -> Self {
        LossRecord {
            step: r[0] as u64,
            stage: r[1] as usize,
            epoch: r[2] as u64,
            l_rec: r[3],
            l_gan_g: r[4],
            l_gan_d: r[5],
            l_enc: r[6],
            gp: r[7],
            wdist: r[8],
        }
    }

    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.step, self.stage, self.epoch, self.l_rec, self.l_gan_g, self.l_gan_d, self.l_enc, self.gp, self.wdist
        )
    }
}

pub fn render_losses_csv(history: &[LossRecord]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for rec in history {
        writeln!(out, "{}", rec.csv_line()).expect("writing to a String");
    }
    out
}

/// Outcome of one discriminator update.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CriticOutcome {
    /// Loss before the update.
    pub loss: f64,
    pub gp: f64,
    /// `mean D(x) - mean D(x_gen)` before the update.
    pub wdist: f64,
}

fn mean(t: &Tensor) -> f64 {
    t.sum() / t.numel() as f64
}

/// One discriminator update against fixed fakes. `u` holds one
/// interpolation weight per batch item for the gradient penalty.
#[allow(clippy::too_many_arguments)]
pub fn discriminator_step(
    d: &mut Network,
    adam: &mut AdamState,
    cfg: &AdamConfig,
    x: &Tensor,
    x_rec: &Tensor,
    x_gen: &Tensor,
    u: &[f64],
    gp_coeff: f64,
) -> Result<CriticOutcome> {
    let bind = d.params.bind(true, NormMode::Train);
    let net: &Network = d;
    let fwd = |t: &Tensor| net.forward(&bind, &Var::constant(t.clone()));
    let (d_x, d_rec, d_gen) = (fwd(x)?, fwd(x_rec)?, fwd(x_gen)?);
    let gp = gradient_penalty_at(|v| net.forward(&bind, v), x, x_gen, u)?;
    let loss = discriminator_loss(&d_x, &d_rec, &d_gen, &gp, gp_coeff)?;
    let outcome =
        CriticOutcome { loss: loss.item()?, gp: gp.item()?, wdist: mean(d_x.value()) - mean(d_gen.value()) };
    let grads = gradients(&loss, &[&bind])?;
    adam_step(&mut d.params, &grads, adam, cfg)?;
    Ok(outcome)
}

/// One code-discriminator update: prior samples are real, codes are fake.
pub fn code_discriminator_step(
    c: &mut Network,
    adam: &mut AdamState,
    cfg: &AdamConfig,
    z_prior: &Tensor,
    z_enc: &Tensor,
) -> Result<f64> {
    let bind = c.params.bind(true, NormMode::Train);
    let c_prior = c.forward(&bind, &Var::constant(z_prior.clone()))?;
    let c_enc = c.forward(&bind, &Var::constant(z_enc.clone()))?;
    let loss = code_discriminator_loss(&c_prior, &c_enc)?;
    let value = loss.item()?;
    let grads = gradients(&loss, &[&bind])?;
    adam_step(&mut c.params, &grads, adam, cfg)?;
    Ok(value)
}

/// Draws a prior sample `z ~ N(0, I)` of `[b, latent_shape...]`.
pub fn sample_latent(config: &NetworkConfig, batch: usize, rng: &mut impl Rng) -> Tensor {
    let mut shape = vec![batch];
    shape.extend(config.latent_shape);
    Tensor::from_fn(&shape, |_| rng.sample(StandardNormal))
}

/// Encoder, generator with refiner, discriminator and code discriminator
/// updates on one batch, each on fresh forward passes.
pub fn train_step(
    nets: &mut Nets,
    adam: &mut AdamSet,
    batch: &[VoxelScene],
    rng: &mut impl Rng,
    cfg: &TrainConfig,
) -> Result<LossRecord> {
    let dims = nets.g.config.output_dims(nets.stage());
    if let Some(s) = batch.iter().find(|s| s.dims() != dims) {
        return Err(Error::Mismatch(format!("scene {:?} does not match stage resolution {dims:?}", s.dims())));
    }
    let opt = AdamConfig::from_train(cfg);
    let adversarial = cfg.gan_weight > 0.0;
    let code = adversarial && cfg.code_disc_enabled;
    let lw = cfg.loss;
    let b = batch.len();
    let x = one_hot_batch(batch)?;
    let x_var = Var::constant(x.clone());
    let weights = occupancy_weights(batch)?;
    let z = sample_latent(&nets.g.config, b, rng);
    let u: Vec<f64> = (0..b * cfg.n_critic).map(|_| rng.random::<f64>()).collect();
    let frozen = |n: &Network| n.params.bind(false, NormMode::Train);

    // Encoder.
    let l_enc = {
        let (be, bg, br, bc) = (n_bind(&nets.e), frozen(&nets.g), frozen(&nets.r), frozen(&nets.c));
        let z_enc = nets.e.forward(&be, &x_var)?;
        let x_rec = nets.r.forward(&br, &nets.g.forward(&bg, &z_enc)?)?;
        let l_rec = reconstruction_loss(&x, &x_rec, &weights, lw.gamma)?;
        let mut loss = encoder_loss(None, &l_rec, lw.lambda)?;
        if code {
            loss = loss.add(&neg_log(&nets.c.forward(&bc, &z_enc)?)?.scale(cfg.gan_weight)?)?;
        }
        let grads = gradients(&loss, &[&be])?;
        adam_step(&mut nets.e.params, &grads, &mut adam.e, &opt)?;
        loss.item()?
    };

    // Generator and refiner.
    let (l_rec, l_gan_g) = {
        let z_enc = nets.e.eval(&x)?;
        let (bg, br, bd) = (n_bind(&nets.g), n_bind(&nets.r), frozen(&nets.d));
        let x_rec = nets.r.forward(&br, &nets.g.forward(&bg, &Var::constant(z_enc))?)?;
        let l_rec = reconstruction_loss(&x, &x_rec, &weights, lw.gamma)?;
        let mut loss = l_rec.scale(lw.lambda)?;
        let mut l_gan_g = 0.0;
        if adversarial {
            let x_gen = nets.r.forward(&br, &nets.g.forward(&bg, &Var::constant(z.clone()))?)?;
            let adv = generator_loss(&nets.d.forward(&bd, &x_rec)?, &nets.d.forward(&bd, &x_gen)?)?;
            l_gan_g = adv.item()?;
            loss = loss.add(&adv.scale(cfg.gan_weight)?)?;
        }
        let grads = gradients(&loss, &[&bg, &br])?;
        let (g_grads, r_grads) = grads.split_at(bg.trainable_vars().len());
        adam_step(&mut nets.g.params, g_grads, &mut adam.g, &opt)?;
        adam_step(&mut nets.r.params, r_grads, &mut adam.r, &opt)?;
        nets.g.params.apply_stats(&bg.take_stats())?;
        nets.r.params.apply_stats(&br.take_stats())?;
        (l_rec.item()?, l_gan_g)
    };

    // Discriminator against fakes from the updated generator.
    let (mut l_gan_d, mut gp, mut wdist) = (0.0, 0.0, 0.0);
    if adversarial {
        let (be, bg, br) = (frozen(&nets.e), frozen(&nets.g), frozen(&nets.r));
        let z_enc = nets.e.forward(&be, &x_var)?;
        let x_rec = nets.r.forward(&br, &nets.g.forward(&bg, &z_enc)?)?.value().clone();
        let x_gen = nets.r.forward(&br, &nets.g.forward(&bg, &Var::constant(z.clone()))?)?.value().clone();
        for u_k in u.chunks_exact(b) {
            let out = discriminator_step(&mut nets.d, &mut adam.d, &opt, &x, &x_rec, &x_gen, u_k, lw.gp_coeff)?;
            (l_gan_d, gp, wdist) = (out.loss, out.gp, out.wdist);
        }
    }

    // Code discriminator.
    if code {
        let z_enc = nets.e.eval(&x)?;
        code_discriminator_step(&mut nets.c, &mut adam.c, &opt, &z, &z_enc)?;
    }

    Ok(LossRecord { step: 0, stage: nets.stage(), epoch: 0, l_rec, l_gan_g, l_gan_d, l_enc, gp, wdist })
}

fn n_bind(n: &Network) -> Binding {
    n.params.bind(true, NormMode::Train)
}

/// Counters and optimizer state of a run.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainState {
    /// Completed steps.
    pub step: u64,
    pub adam: AdamSet,
    pub history: Vec<LossRecord>,
}

/// A training run over a fixed dataset of full-resolution scenes.
pub struct Session {
    pub config: RunConfig,
    pub nets: Nets,
    pub state: TrainState,
    dataset: Vec<VoxelScene>,
    staged: Option<(usize, Vec<VoxelScene>)>,
    /// Number of stage transitions performed by this session.
    pub grows: usize,
}

impl Session {
    pub fn new(config: RunConfig, dataset: Vec<VoxelScene>) -> Result<Self> {
        config.validate()?;
        let nets = Nets::build(&config.network, 1, config.train.seed)?;
        Self::assemble(config, nets, TrainState::default(), dataset)
    }

    fn assemble(config: RunConfig, nets: Nets, state: TrainState, dataset: Vec<VoxelScene>) -> Result<Self> {
        if dataset.is_empty() {
            return Err(Error::Data("the dataset is empty".into()));
        }
        if dataset.len() < config.train.batch_size {
            return Err(Error::Data(format!(
                "{} scenes cannot fill a batch of {}",
                dataset.len(),
                config.train.batch_size
            )));
        }
        let full = config.network.output_dims(config.network.stages());
        if let Some(s) = dataset.iter().find(|s| s.dims() != full) {
            return Err(Error::Mismatch(format!("scene {:?} differs from the final resolution {full:?}", s.dims())));
        }
        Ok(Session { config, nets, state, dataset, staged: None, grows: 0 })
    }

    pub fn total_epochs(&self) -> u64 {
        (self.config.train.epochs_per_stage * self.config.network.stages()) as u64
    }

    pub fn total_steps(&self) -> u64 {
        self.total_epochs() * self.config.train.steps_per_epoch as u64
    }

    pub fn is_finished(&self) -> bool {
        self.state.step >= self.total_steps()
    }

    fn epoch_of(&self, step: u64) -> u64 {
        step / self.config.train.steps_per_epoch as u64
    }

    fn stage_of(&self, step: u64) -> usize {
        let t = &self.config.train;
        progressive_schedule(self.epoch_of(step), t.epochs_per_stage, self.config.network.stages())
    }

    /// Dataset pooled down to the current stage resolution.
    pub fn stage_data(&mut self) -> Result<&[VoxelScene]> {
        let stage = self.nets.stage();
        if self.staged.as_ref().map(|(s, _)| *s) != Some(stage) {
            let net = &self.config.network;
            let mut factor = [1; 3];
            for f in &net.stage_factors[stage..] {
                for a in 0..3 {
                    factor[a] *= f[a];
                }
            }
            let pooled = self.dataset.iter().map(|s| s.downsample(factor)).collect::<Result<Vec<_>>>()?;
            self.staged = Some((stage, pooled));
        }
        Ok(&self.staged.as_ref().unwrap().1)
    }

    /// Runs the next step, growing first when the schedule moves on.
    pub fn step(&mut self) -> Result<LossRecord> {
        if self.is_finished() {
            return Err(Error::Usage("the schedule is complete".into()));
        }
        let k = self.state.step;
        while self.nets.stage() < self.stage_of(k) {
            self.nets.grow()?;
            for kind in NetKind::ALL {
                self.state.adam.get_mut(kind).retain(&self.nets.get(kind).params);
            }
            self.grows += 1;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.train.seed);
        rng.set_stream(STEP_STREAM | k);
        let batch_size = self.config.train.batch_size;
        let data = self.stage_data()?;
        let batch: Vec<VoxelScene> =
            sample(&mut rng, data.len(), batch_size).into_iter().map(|i| data[i].clone()).collect();
        let mut rec = train_step(&mut self.nets, &mut self.state.adam, &batch, &mut rng, &self.config.train)?;
        rec.step = k;
        rec.epoch = self.epoch_of(k);
        self.state.history.push(rec);
        self.state.step += 1;
        Ok(rec)
    }

    /// Whether the step just completed closes a stage.
    fn at_stage_end(&self) -> bool {
        self.is_finished() || self.stage_of(self.state.step) > self.nets.stage()
    }

    /// Trains to the end of the schedule. With an output directory, writes
    /// `stage_<s>.vxck` at each stage end, then `final.vxck` and `losses.csv`.
    pub fn run(&mut self, out_dir: Option<&Path>, mut on_step: impl FnMut(&LossRecord)) -> Result<()> {
        while !self.is_finished() {
            let rec = self.step()?;
            on_step(&rec);
            if let (Some(dir), true) = (out_dir, self.at_stage_end()) {
                self.to_checkpoint()?.save(&dir.join(format!("stage_{}.vxck", self.nets.stage())))?;
            }
        }
        if let Some(dir) = out_dir {
            self.to_checkpoint()?.save(&dir.join("final.vxck"))?;
            fs::write(dir.join("losses.csv"), render_losses_csv(&self.state.history))?;
        }
        Ok(())
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut tensors = Vec::new();
        for kind in NetKind::ALL {
            for e in self.nets.get(kind).params.iter() {
                tensors.push((e.name.clone(), e.value.clone()));
            }
        }
        for kind in NetKind::ALL {
            let net = self.nets.get(kind);
            let adam = self.state.adam.get(kind);
            tensors.push((format!("adam.t.{}", kind.prefix()), Tensor::scalar(adam.t as f64)));
            for e in net.params.iter() {
                if let Some((m, v)) = adam.moments(&e.name) {
                    tensors.push((format!("adam.m.{}", e.name), m.clone()));
                    tensors.push((format!("adam.v.{}", e.name), v.clone()));
                }
            }
        }
        let rows: Vec<f64> = self.state.history.iter().flat_map(|r| r.to_row()).collect();
        tensors.push(("state.history".into(), Tensor::new(&[self.state.history.len(), 9], rows)?));
        Ok(Checkpoint {
            config_text: self.config.to_text(),
            stage: self.nets.stage() as u32,
            epoch: self.epoch_of(self.state.step),
            step: self.state.step,
            tensors,
        })
    }

    /// Restores networks and state; `dataset` must be the run's dataset.
    pub fn from_checkpoint(ck: &Checkpoint, dataset: Vec<VoxelScene>) -> Result<Self> {
        let config = RunConfig::parse(&ck.config_text)?;
        let nets = nets_from_checkpoint(ck, &config)?;
        let mut state = TrainState { step: ck.step, ..Default::default() };
        for (name, t) in &ck.tensors {
            if let Some(rest) = name.strip_prefix("adam.t.") {
                let kind = kind_of(rest).ok_or_else(|| Error::Checkpoint(format!("unknown network in {name}")))?;
                state.adam.get_mut(kind).t = t.item()? as u64;
            } else if let Some((which, param)) =
                name.strip_prefix("adam.m.").map(|p| ('m', p)).or_else(|| name.strip_prefix("adam.v.").map(|p| ('v', p)))
            {
                let kind = param
                    .split('.')
                    .next()
                    .and_then(kind_of)
                    .ok_or_else(|| Error::Checkpoint(format!("unknown network in {name}")))?;
                let adam = state.adam.get_mut(kind);
                let map = if which == 'm' { &mut adam.m } else { &mut adam.v };
                map.insert(param.to_string(), t.clone());
            }
        }
        let history = ck.tensor("state.history").ok_or_else(|| Error::Checkpoint("missing state.history".into()))?;
        if history.rank() != 2 || history.shape()[1] != 9 || history.shape()[0] as u64 != ck.step {
            return Err(Error::Checkpoint(format!("history {:?} does not cover {} steps", history.shape(), ck.step)));
        }
        state.history = history.data().chunks_exact(9).map(LossRecord::from_row).collect();
        Self::assemble(config, nets, state, dataset)
    }
}

fn kind_of(prefix: &str) -> Option<NetKind> {
    NetKind::ALL.into_iter().find(|k| k.prefix() == prefix)
}

fn is_buffer(name: &str) -> bool {
    name.ends_with(".running_mean") || name.ends_with(".running_var")
}

/// Networks stored in a checkpoint, without optimizer state.
pub fn nets_from_checkpoint(ck: &Checkpoint, config: &RunConfig) -> Result<Nets> {
    let stage = ck.stage as usize;
    let load = |kind: NetKind| -> Result<Network> {
        let prefix = format!("{}.", kind.prefix());
        let mut params = ParamSet::new();
        for (name, t) in ck.tensors.iter().filter(|(n, _)| n.starts_with(&prefix)) {
            params.push(name.clone(), t.clone(), !is_buffer(name))?;
        }
        Network::from_params(kind, &config.network, stage, config.train.seed, params)
    };
    Ok(Nets {
        g: load(NetKind::Generator)?,
        d: load(NetKind::Discriminator)?,
        e: load(NetKind::Encoder)?,
        r: load(NetKind::Refiner)?,
        c: load(NetKind::CodeDiscriminator)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_values() {
        assert_eq!(progressive_schedule(0, 10, 3), 1);
        assert_eq!(progressive_schedule(10, 10, 3), 2);
        assert_eq!(progressive_schedule(25, 10, 3), 3);
        assert_eq!(progressive_schedule(1000, 10, 3), 3);
    }

    #[test]
    fn first_adam_step_moves_by_learning_rate() {
        let mut p = ParamSet::new();
        p.push("w", Tensor::scalar(0.0), true).unwrap();
        let cfg = AdamConfig { lr: 1e-3, beta1: 0.5, beta2: 0.999, eps: 1e-8 };
        let mut st = AdamState::default();
        adam_step(&mut p, &[("w".into(), Tensor::scalar(1.0))], &mut st, &cfg).unwrap();
        let w = p.get("w").unwrap().item().unwrap();
        assert!((w + 1e-3 / (1.0 + 1e-8)).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = ParamSet::new();
        p.push("w", Tensor::from_fn(&[3], |i| i as f64 - 1.3), true).unwrap();
        let before = p.get("w").unwrap().clone();
        let mut st = AdamState::default();
        let cfg = AdamConfig { lr: 0.1, beta1: 0.5, beta2: 0.999, eps: 1e-8 };
        adam_step(&mut p, &[("w".into(), Tensor::zeros(&[3]))], &mut st, &cfg).unwrap();
        assert!(p.get("w").unwrap().bit_eq(&before));
    }

    #[test]
    fn adam_rejects_wrong_shapes() {
        let mut p = ParamSet::new();
        p.push("w", Tensor::zeros(&[2]), true).unwrap();
        let cfg = AdamConfig { lr: 0.1, beta1: 0.5, beta2: 0.999, eps: 1e-8 };
        let r = adam_step(&mut p, &[("w".into(), Tensor::zeros(&[3]))], &mut AdamState::default(), &cfg);
        assert!(matches!(r, Err(Error::Mismatch(_))));
    }

    #[test]
    fn csv_rows_follow_header() {
        let rec = LossRecord { step: 3, stage: 1, epoch: 0, l_rec: 0.5, l_gan_g: 1.0, l_gan_d: 2.0, l_enc: 5.0, gp: 0.25, wdist: -0.125 };
        let csv = render_losses_csv(&[rec]);
        assert_eq!(csv, format!("{CSV_HEADER}\n3,1,0,0.5,1,2,5,0.25,-0.125\n"));
        assert_eq!(LossRecord::from_row(&rec.to_row()), rec);
    }
}
