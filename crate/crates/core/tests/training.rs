mod common;

use common::randn;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use scenegan::checkpoint::Checkpoint;
use scenegan::config::RunConfig;
use scenegan::params::ParamSet;
use scenegan::training::*;
use scenegan::voxel::{generate_toy_scene, VoxelScene};
use scenegan::Error;
use voxgrad::Tensor;

/// Two stages at 10x6x10 with small widths, two steps per epoch.
fn small_config() -> RunConfig {
    RunConfig::parse(
        "preset = tiny
         stage_factors = 2x2x2,1x1x1
         stage_channels = 8,4
         refiner_channels = 4
         refiner_blocks = 1
         code_hidden = 16
         epochs_per_stage = 1
         steps_per_epoch = 2
         batch_size = 2
         seed = 7",
    )
    .unwrap()
}

fn dataset(n: u64) -> Vec<VoxelScene> {
    (0..n).map(|s| generate_toy_scene(s, [10, 6, 10]).unwrap()).collect()
}

fn tensors_bit_eq(a: &Checkpoint, b: &Checkpoint) -> bool {
    a.tensors.len() == b.tensors.len()
        && a.tensors.iter().zip(&b.tensors).all(|((na, ta), (nb, tb))| na == nb && ta.bit_eq(tb))
}

fn single_param(value: Tensor) -> ParamSet {
    let mut p = ParamSet::new();
    p.push("w", value, true).unwrap();
    p
}

#[test]
fn adam_first_step_moves_each_weight_by_lr_against_its_gradient() {
    let w0 = randn(&[7], 1);
    let g = randn(&[7], 2);
    let mut p = single_param(w0.clone());
    let cfg = AdamConfig { lr: 1e-3, beta1: 0.5, beta2: 0.999, eps: 1e-8 };
    adam_step(&mut p, &[("w".into(), g.clone())], &mut AdamState::default(), &cfg).unwrap();
    for ((new, old), g) in p.get("w").unwrap().data().iter().zip(w0.data()).zip(g.data()) {
        assert!((new - old + 1e-3 * g.signum()).abs() < 1e-10);
    }
}

#[test]
fn adam_zero_learning_rate_leaves_weights_bit_identical() {
    let w0 = randn(&[5], 3);
    let mut p = single_param(w0.clone());
    let mut state = AdamState::default();
    let cfg = AdamConfig { lr: 0.0, beta1: 0.5, beta2: 0.999, eps: 1e-8 };
    for k in 0..3 {
        adam_step(&mut p, &[("w".into(), randn(&[5], 10 + k))], &mut state, &cfg).unwrap();
    }
    assert!(p.get("w").unwrap().bit_eq(&w0));
    assert_eq!(state.t, 3);
}

#[test]
fn adam_rejects_gradients_of_the_wrong_shape() {
    let mut p = single_param(Tensor::zeros(&[3]));
    let cfg = AdamConfig { lr: 1e-3, beta1: 0.5, beta2: 0.999, eps: 1e-8 };
    let r = adam_step(&mut p, &[("w".into(), Tensor::zeros(&[4]))], &mut AdamState::default(), &cfg);
    assert!(matches!(r, Err(Error::Mismatch(_))));
}

#[test]
fn schedule_advances_one_stage_per_block_of_epochs() {
    let stages: Vec<usize> = (0..12).map(|e| progressive_schedule(e, 2, 4)).collect();
    assert_eq!(stages, [1, 1, 2, 2, 3, 3, 4, 4, 4, 4, 4, 4]);
}

#[test]
fn single_step_losses_are_finite() {
    let config = small_config();
    let mut nets = Nets::build(&config.network, 1, 3).unwrap();
    let mut adam = AdamSet::default();
    let batch: Vec<_> = dataset(2).iter().map(|s| s.downsample([1, 1, 1]).unwrap()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let rec = train_step(&mut nets, &mut adam, &batch, &mut rng, &config.train).unwrap();
    for v in rec.to_row() {
        assert!(v.is_finite());
    }
    assert!(rec.l_rec > 0.0 && rec.gp >= 0.0);
    // Every network took exactly one update.
    for kind in scenegan::networks::NetKind::ALL {
        assert_eq!(adam.get(kind).t, 1, "{kind:?}");
    }
}

#[test]
fn wrong_batch_resolution_is_a_mismatch() {
    let config = small_config();
    let mut nets = Nets::build(&config.network, 1, 3).unwrap();
    let batch = vec![generate_toy_scene(0, [8, 6, 8]).unwrap()];
    let r = train_step(&mut nets, &mut AdamSet::default(), &batch, &mut ChaCha8Rng::seed_from_u64(0), &config.train);
    assert!(matches!(r, Err(Error::Mismatch(_))));
}

#[test]
fn full_run_grows_once_per_stage_and_logs_every_step() {
    let mut s = Session::new(small_config(), dataset(3)).unwrap();
    s.run(None, |_| {}).unwrap();
    assert_eq!(s.grows, 1);
    assert_eq!(s.state.history.len() as u64, s.total_steps());
    let stages: Vec<usize> = s.state.history.iter().map(|r| r.stage).collect();
    assert_eq!(stages, [1, 1, 2, 2]);
    let steps: Vec<u64> = s.state.history.iter().map(|r| r.step).collect();
    assert_eq!(steps, [0, 1, 2, 3]);
    assert!(matches!(s.step(), Err(Error::Usage(_))));
}

#[test]
fn identical_configs_give_bit_identical_runs() {
    let run = || {
        let mut s = Session::new(small_config(), dataset(3)).unwrap();
        s.run(None, |_| {}).unwrap();
        s.to_checkpoint().unwrap()
    };
    assert!(tensors_bit_eq(&run(), &run()));
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let mut full = Session::new(small_config(), dataset(3)).unwrap();
    full.run(None, |_| {}).unwrap();

    let mut first = Session::new(small_config(), dataset(3)).unwrap();
    for _ in 0..3 {
        first.step().unwrap();
    }
    let bytes = first.to_checkpoint().unwrap().encode().unwrap();
    let mut resumed = Session::from_checkpoint(&Checkpoint::decode(&bytes).unwrap(), dataset(3)).unwrap();
    assert_eq!(resumed.state.step, 3);
    resumed.run(None, |_| {}).unwrap();

    let (a, b) = (full.to_checkpoint().unwrap(), resumed.to_checkpoint().unwrap());
    assert!(tensors_bit_eq(&a, &b));
    assert_eq!(full.state.history, resumed.state.history);
}

#[test]
fn checkpoint_round_trip_is_lossless() {
    let mut s = Session::new(small_config(), dataset(2)).unwrap();
    s.step().unwrap();
    let ck = s.to_checkpoint().unwrap();
    let back = Checkpoint::decode(&ck.encode().unwrap()).unwrap();
    assert_eq!(back.config_text, ck.config_text);
    assert_eq!((back.stage, back.epoch, back.step), (ck.stage, ck.epoch, ck.step));
    assert!(tensors_bit_eq(&back, &ck));
    let restored = Session::from_checkpoint(&back, dataset(2)).unwrap();
    assert_eq!(restored.state, s.state);
}

#[test]
fn session_validates_its_dataset() {
    assert!(matches!(Session::new(small_config(), vec![]), Err(Error::Data(_))));
    assert!(matches!(Session::new(small_config(), dataset(1)), Err(Error::Data(_))));
    let wrong = vec![generate_toy_scene(0, [8, 6, 8]).unwrap(); 2];
    assert!(matches!(Session::new(small_config(), wrong), Err(Error::Mismatch(_))));
}

#[test]
fn stage_data_is_pooled_to_the_stage_resolution() {
    let mut config = small_config();
    config.network.stage_factors = vec![[2; 3], [2; 3]];
    let data: Vec<_> = (0..2).map(|s| generate_toy_scene(s, [20, 12, 20]).unwrap()).collect();
    let mut s = Session::new(config, data).unwrap();
    let pooled = s.stage_data().unwrap();
    assert!(pooled.iter().all(|p| p.dims() == [10, 6, 10]));
    assert!(pooled.iter().all(|p| p.labels().iter().all(|&c| c < 12)));
}

#[test]
fn loss_csv_has_header_and_one_row_per_step() {
    let mut s = Session::new(small_config(), dataset(2)).unwrap();
    s.run(None, |_| {}).unwrap();
    let csv = render_losses_csv(&s.state.history);
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], CSV_HEADER);
    assert_eq!(lines.len(), 1 + s.state.history.len());
    for (line, rec) in lines[1..].iter().zip(&s.state.history) {
        let values: Vec<f64> = line.split(',').map(|v| v.parse().unwrap()).collect();
        assert_eq!(values.len(), 9);
        assert_eq!(values[0], rec.step as f64);
    }
}

#[test]
fn autoencoder_only_mode_skips_adversarial_updates() {
    let mut config = small_config();
    config.train.gan_weight = 0.0;
    let mut s = Session::new(config, dataset(2)).unwrap();
    let rec = s.step().unwrap();
    assert_eq!((rec.l_gan_g, rec.l_gan_d, rec.gp, rec.wdist), (0.0, 0.0, 0.0, 0.0));
    assert_eq!(s.state.adam.d.t, 0);
    assert_eq!(s.state.adam.c.t, 0);
}
