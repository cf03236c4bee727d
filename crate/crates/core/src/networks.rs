//! Generator, encoder, discriminator, refiner and code discriminator, each
//! described by a layer plan that is a pure function of config and stage.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use voxgrad::{Tensor, Var};

use crate::error::{Error, Result};
use crate::nn::{
    init_layer, layer_forward, resnet_block, Activation, LayerKind, LayerSpec, NormKind, DEFAULT_BN_EPS,
    DEFAULT_PIXEL_EPS,
};
use crate::params::{Binding, NormMode, ParamSet};
use crate::voxel::NUM_CLASSES;

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkConfig {
    /// `(d, h, w, channels)` of the latent code.
    pub latent_shape: [usize; 4],
    /// Upsampling factor of each generator stage.
    pub stage_factors: Vec<[usize; 3]>,
    /// Output width of each generator stage.
    pub stage_channels: Vec<usize>,
    pub class_channels: usize,
    pub leaky_slope: f64,
    pub pixel_eps: f64,
    pub bn_eps: f64,
    pub gen_norm: NormKind,
    pub refiner_channels: usize,
    pub refiner_blocks: usize,
    pub code_hidden: usize,
}

impl NetworkConfig {
    /// Three ×2 stages from the 5×3×5 latent to 40×24×40.
    pub fn desk() -> Self {
        NetworkConfig {
            latent_shape: [5, 3, 5, 16],
            stage_factors: vec![[2; 3]; 3],
            stage_channels: vec![256, 128, 64],
            class_channels: NUM_CLASSES,
            leaky_slope: 0.2,
            pixel_eps: DEFAULT_PIXEL_EPS,
            bn_eps: DEFAULT_BN_EPS,
            gen_norm: NormKind::PixelNorm,
            refiner_channels: 64,
            refiner_blocks: 4,
            code_hidden: 512,
        }
    }

    /// Four ×2 stages and one ×3 stage, reaching 240×144×240. Meant for
    /// symbolic shape checks; training at this size is out of reach on a CPU.
    pub fn full_scale() -> Self {
        NetworkConfig {
            stage_factors: vec![[2; 3], [2; 3], [2; 3], [2; 3], [3; 3]],
            stage_channels: vec![128, 64, 32, 16, 8],
            ..Self::desk()
        }
    }

    /// Desk geometry with narrow layers, for tests and quick runs.
    pub fn tiny() -> Self {
        NetworkConfig {
            stage_channels: vec![32, 16, 8],
            refiner_channels: 8,
            code_hidden: 64,
            ..Self::desk()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "full-scale" => Ok(Self::full_scale()),
            "tiny" => Ok(Self::tiny()),
            other => Err(Error::Config(format!("unknown preset {other:?} (desk | full-scale | tiny)"))),
        }
    }

    pub fn stages(&self) -> usize {
        self.stage_factors.len()
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.latent_shape.contains(&0) {
            return fail(format!("latent shape {:?} has an empty axis", self.latent_shape));
        }
        if self.stage_factors.is_empty() || self.stage_factors.len() != self.stage_channels.len() {
            return fail(format!(
                "{} stage factors but {} stage widths",
                self.stage_factors.len(),
                self.stage_channels.len()
            ));
        }
        if self.stage_factors.iter().flatten().any(|f| !(1..=3).contains(f)) {
            return fail("stage factors must be 1, 2 or 3".into());
        }
        if self.stage_channels.contains(&0) || self.refiner_channels == 0 || self.code_hidden == 0 {
            return fail("layer widths must be positive".into());
        }
        if self.class_channels != NUM_CLASSES {
            return fail(format!("class_channels must be {NUM_CLASSES}"));
        }
        if !(0.0..1.0).contains(&self.leaky_slope) {
            return fail(format!("leaky_slope must lie in [0, 1), got {}", self.leaky_slope));
        }
        if !(self.pixel_eps > 0.0 && self.bn_eps > 0.0) {
            return fail("normalization eps must be positive".into());
        }
        Ok(())
    }

    pub fn latent_dims(&self) -> [usize; 3] {
        [self.latent_shape[0], self.latent_shape[1], self.latent_shape[2]]
    }

    pub fn latent_numel(&self) -> usize {
        self.latent_shape.iter().product()
    }

    /// Generator output extents after `stage` stages.
    pub fn output_dims(&self, stage: usize) -> [usize; 3] {
        let mut dims = self.latent_dims();
        for f in &self.stage_factors[..stage.min(self.stages())] {
            for a in 0..3 {
                dims[a] *= f[a];
            }
        }
        dims
    }

    /// Width entering stage `i` (1-based); the latent width feeds stage 1.
    fn width(&self, i: usize) -> usize {
        if i == 0 {
            self.latent_shape[3]
        } else {
            self.stage_channels[i - 1]
        }
    }

    fn leaky(&self) -> Activation {
        Activation::LeakyRelu(self.leaky_slope)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NetKind {
    Generator,
    Discriminator,
    Encoder,
    Refiner,
    CodeDiscriminator,
}

impl NetKind {
    pub const ALL: [NetKind; 5] = [
        NetKind::Generator,
        NetKind::Discriminator,
        NetKind::Encoder,
        NetKind::Refiner,
        NetKind::CodeDiscriminator,
    ];

    pub fn prefix(self) -> &'static str {
        match self {
            NetKind::Generator => "g",
            NetKind::Discriminator => "d",
            NetKind::Encoder => "e",
            NetKind::Refiner => "r",
            NetKind::CodeDiscriminator => "c",
        }
    }

    pub fn grows(self) -> bool {
        matches!(self, NetKind::Generator | NetKind::Discriminator | NetKind::Encoder)
    }

    fn stream_domain(self) -> u64 {
        match self {
            NetKind::Generator => 1,
            NetKind::Discriminator => 2,
            NetKind::Encoder => 3,
            NetKind::Refiner => 4,
            NetKind::CodeDiscriminator => 5,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Block {
    Layer { name: String, spec: LayerSpec },
    Residual { name: String, first: LayerSpec, second: LayerSpec },
    /// `[b, ...] -> [b, n]` ahead of dense layers.
    Flatten,
}

impl Block {
    fn layer(name: String, spec: LayerSpec) -> Self {
        Block::Layer { name, spec }
    }

    /// Parameterized layers with their names.
    fn layers(&self) -> Vec<(String, &LayerSpec)> {
        match self {
            Block::Layer { name, spec } => vec![(name.clone(), spec)],
            Block::Residual { name, first, second } => vec![(format!("{name}.a"), first), (format!("{name}.b"), second)],
            Block::Flatten => Vec::new(),
        }
    }

    fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        match self {
            Block::Layer { spec, .. } => spec.output_shape(input),
            Block::Residual { first, second, .. } => {
                let out = second.output_shape(&first.output_shape(input)?)?;
                if out != input {
                    return Err(Error::Mismatch(format!("residual branch maps {input:?} to {out:?}")));
                }
                Ok(out)
            }
            Block::Flatten => {
                let (&b, rest) = input.split_first().ok_or_else(|| Error::Mismatch("flatten of a scalar".into()))?;
                Ok(vec![b, rest.iter().product()])
            }
        }
    }

    fn forward(&self, bind: &Binding, x: &Var) -> Result<Var> {
        match self {
            Block::Layer { name, spec } => layer_forward(spec, name, bind, x),
            Block::Residual { name, first, second } => resnet_block(x, name, first, second, bind),
            Block::Flatten => Ok(x.flatten()?),
        }
    }
}

/// Blocks of network `kind` at `stage`, in evaluation order.
pub fn layer_plan(kind: NetKind, config: &NetworkConfig, stage: usize) -> Result<Vec<Block>> {
    config.validate()?;
    if kind.grows() && !(1..=config.stages()).contains(&stage) {
        return Err(Error::Usage(format!("stage {stage} outside 1..={}", config.stages())));
    }
    let leaky = config.leaky();
    let p = kind.prefix();
    let mut blocks = Vec::new();
    match kind {
        NetKind::Generator => {
            for i in 1..=stage {
                let spec =
                    LayerSpec::resampling(LayerKind::Upsample, config.width(i - 1), config.width(i), config.stage_factors[i - 1])
                        .with_norm(config.gen_norm, if config.gen_norm == NormKind::BatchNorm { config.bn_eps } else { config.pixel_eps })
                        .with_activation(leaky);
                blocks.push(Block::layer(format!("{p}.stage{i}"), spec));
            }
            let head = LayerSpec::pointwise(config.width(stage), config.class_channels).with_activation(Activation::Softmax);
            blocks.push(Block::layer(format!("{p}.head{stage}"), head));
        }
        NetKind::Discriminator | NetKind::Encoder => {
            let from_rgb = LayerSpec::pointwise(config.class_channels, config.width(stage)).with_activation(leaky);
            blocks.push(Block::layer(format!("{p}.from_rgb{stage}"), from_rgb));
            for i in (1..=stage).rev() {
                let spec = LayerSpec::resampling(
                    LayerKind::Downsample,
                    config.width(i),
                    config.width(i - 1),
                    config.stage_factors[i - 1],
                )
                .with_activation(leaky);
                blocks.push(Block::layer(format!("{p}.down{i}"), spec));
            }
            if kind == NetKind::Discriminator {
                blocks.push(Block::Flatten);
                let dense = LayerSpec::dense(config.latent_numel(), 1).with_activation(Activation::Sigmoid);
                blocks.push(Block::layer(format!("{p}.dense"), dense));
            } else {
                let latent = LayerSpec::pointwise(config.latent_shape[3], config.latent_shape[3]);
                blocks.push(Block::layer(format!("{p}.latent"), latent));
            }
        }
        NetKind::Refiner => {
            let rc = config.refiner_channels;
            blocks.push(Block::layer(
                format!("{p}.in"),
                LayerSpec::pointwise(config.class_channels, rc).with_activation(leaky),
            ));
            for k in 1..=config.refiner_blocks {
                let conv = LayerSpec { kernel: [3; 3], ..LayerSpec::pointwise(rc, rc) }.with_norm(NormKind::BatchNorm, config.bn_eps);
                blocks.push(Block::Residual {
                    name: format!("{p}.block{k}"),
                    first: conv.clone().with_activation(leaky),
                    second: conv,
                });
            }
            blocks.push(Block::layer(
                format!("{p}.out"),
                LayerSpec::pointwise(rc, config.class_channels).with_activation(Activation::Softmax),
            ));
        }
        NetKind::CodeDiscriminator => {
            let h = config.code_hidden;
            blocks.push(Block::Flatten);
            blocks.push(Block::layer(format!("{p}.fc1"), LayerSpec::dense(config.latent_numel(), h).with_activation(leaky)));
            blocks.push(Block::layer(format!("{p}.fc2"), LayerSpec::dense(h, h).with_activation(leaky)));
            blocks.push(Block::layer(format!("{p}.fc3"), LayerSpec::dense(h, 1).with_activation(Activation::Sigmoid)));
        }
    }
    Ok(blocks)
}

/// Input shape (without batch) expected by network `kind` at `stage`.
pub fn input_shape(kind: NetKind, config: &NetworkConfig, stage: usize) -> Vec<usize> {
    match kind {
        NetKind::Generator | NetKind::CodeDiscriminator => config.latent_shape.to_vec(),
        NetKind::Discriminator | NetKind::Encoder | NetKind::Refiner => {
            let [d, h, w] = config.output_dims(stage);
            vec![d, h, w, config.class_channels]
        }
    }
}

/// Shapes after each block, starting with the input, computed symbolically.
pub fn trace(blocks: &[Block], input: &[usize]) -> Result<Vec<Vec<usize>>> {
    let mut shapes = vec![input.to_vec()];
    for block in blocks {
        let next = block.output_shape(shapes.last().unwrap())?;
        shapes.push(next);
    }
    Ok(shapes)
}

/// Distinct consecutive spatial extents along a trace.
pub fn spatial_path(shapes: &[Vec<usize>]) -> Vec<[usize; 3]> {
    let mut path: Vec<[usize; 3]> = Vec::new();
    for s in shapes.iter().filter(|s| s.len() == 5) {
        let dims = [s[1], s[2], s[3]];
        if path.last() != Some(&dims) {
            path.push(dims);
        }
    }
    path
}

fn init_rng(seed: u64, kind: NetKind, stage: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((kind.stream_domain() << 32) | stage as u64);
    rng
}

/// One network: its kind, current stage and parameters.
#[derive(Clone, Debug)]
pub struct Network {
    pub kind: NetKind,
    pub config: NetworkConfig,
    pub stage: usize,
    pub seed: u64,
    pub params: ParamSet,
}

impl Network {
    /// Builds at stage 1 and grows to `stage`, so direct construction and
    /// incremental growth give identical parameters.
    pub fn build(kind: NetKind, config: &NetworkConfig, stage: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        if !(1..=config.stages()).contains(&stage) {
            return Err(Error::Usage(format!("stage {stage} outside 1..={}", config.stages())));
        }
        let mut net = Network { kind, config: config.clone(), stage: 1, seed, params: ParamSet::new() };
        let mut rng = init_rng(seed, kind, if kind.grows() { 1 } else { 0 });
        for block in net.blocks()? {
            for (name, spec) in block.layers() {
                init_layer(spec, &name, &mut rng, &mut net.params)?;
            }
        }
        while net.stage < stage {
            net.grow()?;
        }
        Ok(net)
    }

    /// Wraps stored parameters without initialization, e.g. from a checkpoint.
    pub fn from_params(kind: NetKind, config: &NetworkConfig, stage: usize, seed: u64, params: ParamSet) -> Result<Self> {
        let net = Network { kind, config: config.clone(), stage, seed, params };
        for block in net.blocks()? {
            for (name, spec) in block.layers() {
                let weight = net
                    .params
                    .get(&format!("{name}.weight"))
                    .ok_or_else(|| Error::Checkpoint(format!("missing parameters of layer {name}")))?;
                if weight.shape() != spec.weight_shape().as_slice() {
                    return Err(Error::Checkpoint(format!("layer {name} has weight shape {:?}", weight.shape())));
                }
            }
        }
        Ok(net)
    }

    pub fn blocks(&self) -> Result<Vec<Block>> {
        layer_plan(self.kind, &self.config, self.stage)
    }

    pub fn input_shape(&self, batch: usize) -> Vec<usize> {
        let mut shape = vec![batch];
        shape.extend(input_shape(self.kind, &self.config, self.stage));
        shape
    }

    pub fn trace(&self, batch: usize) -> Result<Vec<Vec<usize>>> {
        trace(&self.blocks()?, &self.input_shape(batch))
    }

    /// Adds the next stage. The generator swaps its output head for a new
    /// stage plus head; discriminator and encoder swap their input layer
    /// for a new input layer plus downsampling layer. Surviving tensors
    /// are untouched.
    /// Fully convolutional and dense networks only move to the new
    /// resolution.
    pub fn grow(&mut self) -> Result<()> {
        if self.stage >= self.config.stages() {
            return Err(Error::Usage(format!("already at the final stage {}", self.stage)));
        }
        if !self.kind.grows() {
            self.stage += 1;
            return Ok(());
        }
        let p = self.kind.prefix();
        let old = self.stage;
        let retired = match self.kind {
            NetKind::Generator => format!("{p}.head{old}"),
            _ => format!("{p}.from_rgb{old}"),
        };
        self.params.remove_layer(&retired);
        self.stage += 1;
        let mut rng = init_rng(self.seed, self.kind, self.stage);
        for block in self.blocks()? {
            for (name, spec) in block.layers() {
                if self.params.get(&format!("{name}.weight")).is_none() {
                    init_layer(spec, &name, &mut rng, &mut self.params)?;
                }
            }
        }
        Ok(())
    }

    pub fn forward(&self, bind: &Binding, x: &Var) -> Result<Var> {
        let expected = self.input_shape(x.shape().first().copied().unwrap_or(0));
        if x.shape() != expected.as_slice() || expected[0] == 0 {
            return Err(Error::Mismatch(format!(
                "{:?} at stage {} expects {expected:?}, got {:?}",
                self.kind,
                self.stage,
                x.shape()
            )));
        }
        let mut h = x.clone();
        for block in self.blocks()? {
            h = block.forward(bind, &h)?;
        }
        Ok(h)
    }

    /// Inference with stored statistics and no gradient tracking.
    pub fn eval(&self, x: &Tensor) -> Result<Tensor> {
        let bind = self.params.bind(false, NormMode::Eval);
        Ok(self.forward(&bind, &Var::constant(x.clone()))?.value().clone())
    }

    pub fn parameter_count(&self) -> usize {
        self.params.trainable_count()
    }
}

/// Trainable scalar count of `kind` at `stage`, from the layer plan alone.
pub fn parameter_count(kind: NetKind, config: &NetworkConfig, stage: usize) -> Result<usize> {
    let mut total = 0;
    for block in layer_plan(kind, config, stage)? {
        for (_, spec) in block.layers() {
            total += spec.weight_shape().iter().product::<usize>() + spec.out_channels;
            if spec.norm == NormKind::BatchNorm {
                total += 2 * spec.out_channels;
            }
        }
    }
    Ok(total)
}

/// Grows generator, discriminator and encoder together.
pub fn grow_all(g: &mut Network, d: &mut Network, e: &mut Network) -> Result<()> {
    if g.stage != d.stage || g.stage != e.stage {
        return Err(Error::Mismatch(format!("networks at stages {}, {}, {}", g.stage, d.stage, e.stage)));
    }
    g.grow()?;
    d.grow()?;
    e.grow()
}
