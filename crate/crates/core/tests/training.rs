use automask::checkpoint::Checkpoint;
use automask::config::{Config, Mode};
use automask::data::{generate_dataset, ShapeSample};
use automask::train::{pretrain, warmup_extractor, RunOutputs, Trainer, METRICS_HEADER};

fn small_config(mode: Mode, epochs: usize) -> Config {
    let mut cfg = Config::default();
    cfg.model.dim = 16;
    cfg.model.heads = 2;
    cfg.model.depth = 1;
    cfg.model.decoder_dim = 8;
    cfg.model.decoder_depth = 1;
    cfg.model.decoder_heads = 2;
    cfg.model.mlp_ratio = 2;
    cfg.train.mode = mode;
    cfg.train.epochs = epochs;
    cfg.train.batch_size = 8;
    cfg.train.base_lr = 1e-2;
    cfg
}

fn data(n: usize) -> Vec<ShapeSample> {
    generate_dataset(n, 3, 0.05).unwrap()
}

fn extractor_for(cfg: &Config, samples: &[ShapeSample]) -> Option<automask::ParamStore> {
    cfg.train
        .mode
        .needs_warmup()
        .then(|| warmup_extractor::<f64>(cfg, 11, samples).unwrap())
}

const ALL_MODES: [Mode; 5] = [Mode::Random, Mode::Bbox, Mode::Automae, Mode::TwoStage, Mode::FromScratch];

#[test]
fn same_seed_gives_identical_metrics_and_weights() {
    let samples = data(24);
    for mode in ALL_MODES {
        let cfg = small_config(mode, 2);
        let ex = extractor_for(&cfg, &samples);
        let a = pretrain::<f64>(&cfg, 5, &samples, ex.clone(), &RunOutputs::default()).unwrap();
        let b = pretrain::<f64>(&cfg, 5, &samples, ex, &RunOutputs::default()).unwrap();
        assert_eq!(a.metrics, b.metrics, "{mode:?}");
        assert_eq!(a.models.mae.encoder_params, b.models.mae.encoder_params, "{mode:?}");
    }
}

#[test]
fn different_seeds_differ() {
    let samples = data(24);
    let cfg = small_config(Mode::Random, 1);
    let a = pretrain::<f64>(&cfg, 1, &samples, None, &RunOutputs::default()).unwrap();
    let b = pretrain::<f64>(&cfg, 2, &samples, None, &RunOutputs::default()).unwrap();
    assert_ne!(a.metrics[0].loss_recon, b.metrics[0].loss_recon);
}

#[test]
fn loss_drops_over_twenty_epochs_in_every_mode() {
    let samples = data(32);
    for mode in ALL_MODES {
        for seed in 0..3 {
            let cfg = small_config(mode, 20);
            let ex = extractor_for(&cfg, &samples);
            let run = pretrain::<f64>(&cfg, seed, &samples, ex, &RunOutputs::default()).unwrap();
            let recon: Vec<f64> = run.metrics.iter().filter_map(|m| m.loss_recon).collect();
            assert!(
                recon.last().unwrap() < recon.first().unwrap(),
                "{mode:?} seed {seed}: {recon:?}"
            );
        }
    }
}

#[test]
fn checkpoint_resume_reproduces_the_next_step() {
    let samples = data(24);
    let dir = tempfile::tempdir().unwrap();
    for mode in ALL_MODES {
        let cfg = small_config(mode, 2);
        let ex = extractor_for(&cfg, &samples);
        let mut t = Trainer::<f64>::new(&cfg, 9, &samples, ex).unwrap();
        t.run_epoch().unwrap();
        let path = dir.path().join(format!("{}.amae", mode.name()));
        t.save_checkpoint(&path).unwrap();
        let ckpt = Checkpoint::load(&path).unwrap();
        let mut resumed = Trainer::<f64>::from_checkpoint(&cfg, 9, &samples, &ckpt).unwrap();
        assert_eq!(resumed.checkpoint(), ckpt, "{mode:?}");
        assert_eq!(resumed.epoch, 1);

        let rest_a = t.run_epoch().unwrap();
        let rest_b = resumed.run_epoch().unwrap();
        assert_eq!(rest_a, rest_b, "{mode:?}");
        assert_eq!(t.checkpoint(), resumed.checkpoint(), "{mode:?}");
    }
}

#[test]
fn frozen_extractor_is_untouched_by_automae_training() {
    let samples = data(24);
    let cfg = small_config(Mode::Automae, 2);
    let ex = extractor_for(&cfg, &samples).unwrap();
    let run = pretrain::<f64>(&cfg, 4, &samples, Some(ex.clone()), &RunOutputs::default()).unwrap();
    assert_eq!(run.models.extractor.as_ref(), Some(&ex));
    assert_ne!(run.models.mae.encoder_params, ex);
}

#[test]
fn two_stage_freezes_the_generator_in_stage_two() {
    let samples = data(24);
    let mut cfg = small_config(Mode::TwoStage, 2);
    cfg.train.stage1_epochs = Some(2);
    let ex = extractor_for(&cfg, &samples);
    let mut t = Trainer::<f64>::new(&cfg, 6, &samples, ex).unwrap();
    let head0 = t.models.head_params.clone();
    let mae0 = t.models.mae.encoder_params.clone();
    t.run_epoch().unwrap();
    t.run_epoch().unwrap();
    let head1 = t.models.head_params.clone();
    assert_ne!(head0, head1, "stage one trains the generator");
    assert_eq!(mae0, t.models.mae.encoder_params, "stage one leaves the MAE alone");
    for _ in 0..2 {
        let m = t.run_epoch().unwrap();
        assert!(m.loss_recon.is_some());
        assert_eq!(head1, t.models.head_params);
    }
    assert_ne!(mae0, t.models.mae.encoder_params);
    assert!(t.run_epoch().is_err(), "run is finished");
}

#[test]
fn zero_boost_bbox_run_equals_random_run() {
    let samples = data(24);
    let random = small_config(Mode::Random, 2);
    let mut bbox = small_config(Mode::Bbox, 2);
    bbox.mask.beta = 0.0;
    let a = pretrain::<f64>(&random, 8, &samples, None, &RunOutputs::default()).unwrap();
    let b = pretrain::<f64>(&bbox, 8, &samples, None, &RunOutputs::default()).unwrap();
    assert_eq!(a.models.mae.encoder_params, b.models.mae.encoder_params);
    let losses = |r: &automask::train::Pretrained<f64>| r.metrics.iter().map(|m| m.loss_recon).collect::<Vec<_>>();
    assert_eq!(losses(&a), losses(&b));
}

#[test]
fn metrics_csv_has_one_row_per_epoch_in_order() {
    let samples = data(24);
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config(Mode::TwoStage, 3);
    cfg.train.stage1_epochs = Some(2);
    let outputs = RunOutputs {
        metrics_csv: Some(dir.path().join("m.csv")),
        checkpoint: Some(dir.path().join("c.amae")),
    };
    let ex = extractor_for(&cfg, &samples);
    pretrain::<f64>(&cfg, 2, &samples, ex, &outputs).unwrap();
    let text = std::fs::read_to_string(outputs.metrics_csv.unwrap()).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some(METRICS_HEADER));
    let epochs: Vec<usize> = lines.map(|l| l.split(',').next().unwrap().parse().unwrap()).collect();
    assert_eq!(epochs, (1..=5).collect::<Vec<_>>());
    assert!(outputs.checkpoint.unwrap().exists());
}

#[test]
fn f32_and_f64_runs_track_each_other() {
    let samples = data(16);
    let cfg = small_config(Mode::Random, 1);
    let a = pretrain::<f64>(&cfg, 3, &samples, None, &RunOutputs::default()).unwrap();
    let b = pretrain::<f32>(&cfg, 3, &samples, None, &RunOutputs::default()).unwrap();
    let (la, lb) = (a.metrics[0].loss_recon.unwrap(), b.metrics[0].loss_recon.unwrap());
    assert!((la - lb).abs() < 1e-3 * la.abs().max(1.0), "{la} vs {lb}");
}

#[test]
fn modes_needing_an_extractor_reject_a_missing_one() {
    let samples = data(8);
    for mode in [Mode::Automae, Mode::TwoStage] {
        let cfg = small_config(mode, 1);
        assert!(Trainer::<f64>::new(&cfg, 0, &samples, None).is_err());
    }
}
