//! Flat `key = value` run configuration. A preset supplies every network
//! field; other keys override it. An empty file is a valid configuration.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::networks::NetworkConfig;
use crate::nn::NormKind;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs_per_stage: usize,
    pub steps_per_epoch: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub loss: LossWeights,
    pub seed: u64,
    pub code_disc_enabled: bool,
    /// Discriminator updates per step.
    pub n_critic: usize,
    /// Weight of every adversarial term; 0 trains a plain autoencoder.
    pub gan_weight: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs_per_stage: 10,
            steps_per_epoch: 20,
            batch_size: 4,
            learning_rate: 1e-4,
            adam_beta1: 0.5,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            loss: LossWeights::default(),
            seed: 0,
            code_disc_enabled: true,
            n_critic: 1,
            gan_weight: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: &str| Err(Error::Config(msg.to_string()));
        if self.epochs_per_stage == 0 || self.steps_per_epoch == 0 || self.batch_size == 0 || self.n_critic == 0 {
            return fail("epochs_per_stage, steps_per_epoch, batch_size and n_critic must be at least 1");
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return fail("learning_rate must be finite and non-negative");
        }
        if !((0.0..1.0).contains(&self.adam_beta1) && (0.0..1.0).contains(&self.adam_beta2) && self.adam_eps > 0.0) {
            return fail("adam betas must lie in [0, 1) and adam_eps must be positive");
        }
        if !(self.gan_weight >= 0.0 && self.gan_weight.is_finite()) {
            return fail("gan_weight must be finite and non-negative");
        }
        self.loss.validate()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub preset: String,
    pub network: NetworkConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig { preset: "desk".into(), network: NetworkConfig::desk(), train: TrainConfig::default() }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

fn parse_triple(key: &str, value: &str) -> Result<[usize; 3]> {
    let parts: Vec<usize> = value.split('x').map(|p| parse_num(key, p.trim())).collect::<Result<_>>()?;
    parts.try_into().map_err(|_| Error::Config(format!("{key}: expected DxHxW, got {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true or false, got {value:?}"))),
    }
}

fn format_triple(t: &[usize; 3]) -> String {
    format!("{}x{}x{}", t[0], t[1], t[2])
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            pairs.push((k.trim().to_string(), v.trim().to_string()));
        }
        let mut config = RunConfig::default();
        if let Some((_, preset)) = pairs.iter().rev().find(|(k, _)| k == "preset") {
            config.network = NetworkConfig::preset(preset)?;
            config.preset = preset.clone();
        }
        for (k, v) in &pairs {
            config.set(k, v)?;
        }
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        self.train.validate()
    }

    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let net = &mut self.network;
        let tr = &mut self.train;
        match key {
            "preset" => {}
            "latent_shape" => {
                let parts: Vec<usize> = value.split('x').map(|p| parse_num(key, p.trim())).collect::<Result<_>>()?;
                net.latent_shape =
                    parts.try_into().map_err(|_| Error::Config(format!("{key}: expected DxHxWxC, got {value:?}")))?;
            }
            "stage_factors" => {
                net.stage_factors = value.split(',').map(|t| parse_triple(key, t.trim())).collect::<Result<_>>()?
            }
            "stage_channels" => {
                net.stage_channels = value.split(',').map(|c| parse_num(key, c.trim())).collect::<Result<_>>()?
            }
            "leaky_slope" => net.leaky_slope = parse_num(key, value)?,
            "pixel_eps" => net.pixel_eps = parse_num(key, value)?,
            "bn_eps" => net.bn_eps = parse_num(key, value)?,
            "gen_norm" => net.gen_norm = value.parse::<NormKind>()?,
            "refiner_channels" => net.refiner_channels = parse_num(key, value)?,
            "refiner_blocks" => net.refiner_blocks = parse_num(key, value)?,
            "code_hidden" => net.code_hidden = parse_num(key, value)?,
            "epochs_per_stage" => tr.epochs_per_stage = parse_num(key, value)?,
            "steps_per_epoch" => tr.steps_per_epoch = parse_num(key, value)?,
            "batch_size" => tr.batch_size = parse_num(key, value)?,
            "learning_rate" => tr.learning_rate = parse_num(key, value)?,
            "adam_beta1" => tr.adam_beta1 = parse_num(key, value)?,
            "adam_beta2" => tr.adam_beta2 = parse_num(key, value)?,
            "adam_eps" => tr.adam_eps = parse_num(key, value)?,
            "lambda" => tr.loss.lambda = parse_num(key, value)?,
            "gamma" => tr.loss.gamma = parse_num(key, value)?,
            "gp_coeff" => tr.loss.gp_coeff = parse_num(key, value)?,
            "seed" => tr.seed = parse_num(key, value)?,
            "code_disc_enabled" => tr.code_disc_enabled = parse_bool(key, value)?,
            "n_critic" => tr.n_critic = parse_num(key, value)?,
            "gan_weight" => tr.gan_weight = parse_num(key, value)?,
            other => return Err(Error::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    /// Every key with its resolved value; parses back to an equal config.
    pub fn to_text(&self) -> String {
        let n = &self.network;
        let t = &self.train;
        let mut out = String::new();
        let mut put = |k: &str, v: String| writeln!(out, "{k} = {v}").expect("writing to a String");
        put("preset", self.preset.clone());
        put("latent_shape", n.latent_shape.map(|v| v.to_string()).join("x"));
        put("stage_factors", n.stage_factors.iter().map(format_triple).collect::<Vec<_>>().join(","));
        put("stage_channels", n.stage_channels.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(","));
        put("leaky_slope", n.leaky_slope.to_string());
        put("pixel_eps", n.pixel_eps.to_string());
        put("bn_eps", n.bn_eps.to_string());
        put("gen_norm", n.gen_norm.to_string());
        put("refiner_channels", n.refiner_channels.to_string());
        put("refiner_blocks", n.refiner_blocks.to_string());
        put("code_hidden", n.code_hidden.to_string());
        put("epochs_per_stage", t.epochs_per_stage.to_string());
        put("steps_per_epoch", t.steps_per_epoch.to_string());
        put("batch_size", t.batch_size.to_string());
        put("learning_rate", t.learning_rate.to_string());
        put("adam_beta1", t.adam_beta1.to_string());
        put("adam_beta2", t.adam_beta2.to_string());
        put("adam_eps", t.adam_eps.to_string());
        put("lambda", t.loss.lambda.to_string());
        put("gamma", t.loss.gamma.to_string());
        put("gp_coeff", t.loss.gp_coeff.to_string());
        put("seed", t.seed.to_string());
        put("code_disc_enabled", t.code_disc_enabled.to_string());
        put("n_critic", t.n_critic.to_string());
        put("gan_weight", t.gan_weight.to_string());
        out
    }
}
