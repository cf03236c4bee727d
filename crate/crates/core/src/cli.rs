//! Command-line interface.
//!
//! Exit codes: 0 success, 1 internal failure, 2 bad arguments or config,
//! 3 I/O or file-format failure, 4 data or stage mismatch, 5 numeric failure.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use voxgrad::TensorError;

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::training::{nets_from_checkpoint, sample_latent, Session};
use crate::voxel::{
    argmax_scenes, class_accuracy, export_scene, generate_toy_scene, load_scene, one_hot_batch, save_scene,
    ExportFormat, VoxelScene,
};

#[derive(Debug, Parser)]
#[command(name = "scenegan", version, about = "Progressive adversarial autoencoder for labelled voxel scenes")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SampleFormat {
    VoxJson,
    CsvPoints,
    Vxsc,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum PointFormat {
    VoxJson,
    CsvPoints,
}

impl From<PointFormat> for ExportFormat {
    fn from(f: PointFormat) -> Self {
        match f {
            PointFormat::VoxJson => ExportFormat::VoxJson,
            PointFormat::CsvPoints => ExportFormat::CsvPoints,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write synthetic room scenes as scene_<index>.vxsc.
    GenData {
        #[arg(long)]
        count: usize,
        /// Scene extents as DxHxW.
        #[arg(long, value_parser = parse_dims)]
        dims: [usize; 3],
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on a directory of scenes at the final resolution.
    Train {
        /// Flat `key = value` file; every key has a default.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from a checkpoint of the same run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Decode prior samples into scenes.
    Sample {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "vxsc")]
        format: SampleFormat,
    },
    /// Encode and decode one scene, printing the voxel accuracy.
    Reconstruct {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Convert a scene file to a point list.
    Export {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, value_enum)]
        format: PointFormat,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_dims(s: &str) -> std::result::Result<[usize; 3], String> {
    let parts: Vec<usize> = s
        .split('x')
        .map(|p| p.parse::<usize>().map_err(|_| format!("bad extent {p:?}")))
        .collect::<std::result::Result<_, _>>()?;
    let dims: [usize; 3] = parts.try_into().map_err(|_| format!("expected DxHxW, got {s:?}"))?;
    if dims.contains(&0) {
        return Err("extents must be positive".into());
    }
    Ok(dims)
}

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::Usage(_) => 2,
        Error::Io(_) | Error::Format { .. } | Error::Checkpoint(_) => 3,
        Error::Data(_) | Error::Mismatch(_) => 4,
        Error::Tensor(TensorError::NonFinite { .. }) => 5,
        Error::Tensor(_) => 1,
    }
}

/// Parses `args` (including the program name), runs the command and
/// returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn execute(command: Command) -> Result<()> {
    match command {
        Command::GenData { count, dims, seed, out } => cmd_gen_data(count, dims, seed, &out),
        Command::Train { config, data, out, resume } => cmd_train(config.as_deref(), &data, &out, resume.as_deref()),
        Command::Sample { ckpt, count, seed, out, format } => cmd_sample(&ckpt, count, seed, &out, format),
        Command::Reconstruct { ckpt, input, out } => cmd_reconstruct(&ckpt, &input, &out).map(|acc| {
            println!("accuracy {acc:.6}");
        }),
        Command::Export { input, format, out } => cmd_export(&input, format.into(), &out),
    }
}

pub fn cmd_gen_data(count: usize, dims: [usize; 3], seed: u64, out: &Path) -> Result<()> {
    fs::create_dir_all(out)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..count {
        let scene = generate_toy_scene(rng.random(), dims)?;
        save_scene(&scene, &out.join(format!("scene_{i}.vxsc")))?;
    }
    println!("wrote {count} scenes to {}", out.display());
    Ok(())
}

/// Every `*.vxsc` file of `dir`, in file-name order.
pub fn load_dataset(dir: &Path) -> Result<Vec<VoxelScene>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<Vec<_>>>()?
        .into_iter()
        .filter(|p| p.extension().is_some_and(|e| e == "vxsc"))
        .collect();
    paths.sort();
    paths.iter().map(|p| load_scene(p)).collect()
}

pub fn cmd_train(config: Option<&Path>, data: &Path, out: &Path, resume: Option<&Path>) -> Result<()> {
    let dataset = load_dataset(data)?;
    if dataset.is_empty() {
        return Err(Error::Data(format!("no .vxsc scenes in {}", data.display())));
    }
    let mut session = match resume {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            println!("resuming at step {} (stage {})", ck.step, ck.stage);
            Session::from_checkpoint(&ck, dataset)?
        }
        None => {
            let cfg = match config {
                Some(p) => RunConfig::load(p).map_err(|e| match e {
                    Error::Io(io) => Error::Config(format!("cannot read {}: {io}", p.display())),
                    other => other,
                })?,
                None => RunConfig::default(),
            };
            Session::new(cfg, dataset)?
        }
    };
    fs::create_dir_all(out)?;
    let per_epoch = session.config.train.steps_per_epoch as u64;
    session.run(Some(out), |rec| {
        if (rec.step + 1) % per_epoch == 0 {
            println!(
                "epoch {} stage {} step {}: l_rec {:.5} l_gan_g {:.5} l_gan_d {:.5} l_enc {:.5} gp {:.5} wdist {:.5}",
                rec.epoch, rec.stage, rec.step + 1, rec.l_rec, rec.l_gan_g, rec.l_gan_d, rec.l_enc, rec.gp, rec.wdist
            );
        }
    })?;
    println!("finished {} steps; outputs in {}", session.state.step, out.display());
    Ok(())
}

fn load_nets(ckpt: &Path) -> Result<(RunConfig, crate::training::Nets)> {
    let ck = Checkpoint::load(ckpt)?;
    let config = RunConfig::parse(&ck.config_text)?;
    let nets = nets_from_checkpoint(&ck, &config)?;
    Ok((config, nets))
}

pub fn cmd_sample(ckpt: &Path, count: usize, seed: u64, out: &Path, format: SampleFormat) -> Result<()> {
    let (config, nets) = load_nets(ckpt)?;
    fs::create_dir_all(out)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..count {
        let z = sample_latent(&config.network, 1, &mut rng);
        let scene = argmax_scenes(&nets.generate(&z)?, 0)?.remove(0);
        match format {
            SampleFormat::Vxsc => save_scene(&scene, &out.join(format!("sample_{i}.vxsc")))?,
            SampleFormat::VoxJson | SampleFormat::CsvPoints => {
                let f = if format == SampleFormat::VoxJson { ExportFormat::VoxJson } else { ExportFormat::CsvPoints };
                export_scene(&scene, f, &out.join(format!("sample_{i}.{}", f.extension())))?
            }
        }
    }
    println!("wrote {count} samples at {:?} to {}", config.network.output_dims(nets.stage()), out.display());
    Ok(())
}

/// Writes the reconstruction and returns its voxel accuracy.
pub fn cmd_reconstruct(ckpt: &Path, input: &Path, out: &Path) -> Result<f64> {
    let (config, nets) = load_nets(ckpt)?;
    let scene = load_scene(input)?;
    let dims = config.network.output_dims(nets.stage());
    if scene.dims() != dims {
        return Err(Error::Mismatch(format!(
            "scene {:?} does not match the checkpoint resolution {dims:?}",
            scene.dims()
        )));
    }
    let probs = nets.reconstruct(&one_hot_batch(std::slice::from_ref(&scene))?)?;
    let rec = argmax_scenes(&probs, scene.room_class())?.remove(0);
    save_scene(&rec, out)?;
    class_accuracy(&scene, &rec)
}

pub fn cmd_export(input: &Path, format: ExportFormat, out: &Path) -> Result<()> {
    let scene = load_scene(input)?;
    export_scene(&scene, format, out)?;
    println!("exported {} voxels to {}", scene.non_empty_count(), out.display());
    Ok(())
}
