use super::*;
use std::path::Path;
use crate::datagen::{synthesize_dataset, SynthSpec};
use crate::networks::Group;

fn data() -> Dataset {
    synthesize_dataset(&SynthSpec { identities: 4, images_per_identity: 3, seed: 1, ..Default::default() }).unwrap()
}

fn small() -> TrainConfig {
    TrainConfig {
        iterations: 4,
        batch_source: 3,
        batch_target: 3,
        grid_every: 0,
        checkpoint_every: 0,
        net: NetConfig {
            content_dim: 16,
            pose_dim: 8,
            content_widths: vec![4, 8, 8, 8],
            pose_widths: vec![4, 4, 4, 4],
            generator_widths: vec![8, 8, 4, 4],
            generator_res_blocks: 1,
            domain_disc_widths: vec![4, 8],
            pose_disc_widths: vec![4, 8, 8, 8],
            ..NetConfig::default()
        },
        ..TrainConfig::default()
    }
}

#[test]
fn one_step_reports_every_term() {
    let (cfg, d) = (small(), data());
    let mut s = TrainState::init(&cfg).unwrap();
    let r = train_step(&mut s, &cfg, &d).unwrap();
    assert_eq!(r.terms().len(), 11);
    assert!(r.first_non_finite().is_none());
    assert_eq!(s.step, 1);
    assert!(s.mmd_bandwidth.is_none());
    assert!(s.params.all_finite());
}

#[test]
fn first_batch_bandwidth_is_kept() {
    let (mut cfg, d) = (small(), data());
    cfg.mmd_bandwidth = BandwidthRule::FirstBatch;
    let mut s = TrainState::init(&cfg).unwrap();
    train_step(&mut s, &cfg, &d).unwrap();
    let first = s.mmd_bandwidth.expect("set on the first step");
    assert!(first > 0.0);
    train_step(&mut s, &cfg, &d).unwrap();
    assert_eq!(s.mmd_bandwidth, Some(first));
    cfg.mmd_bandwidth = BandwidthRule::PerBatch;
    let mut s = TrainState::init(&cfg).unwrap();
    let r = train_step(&mut s, &cfg, &d).unwrap();
    assert!(r.mmd.is_some_and(f64::is_finite) && s.mmd_bandwidth.is_none());
}

fn changed(a: &ModelParams<f32>, b: &ModelParams<f32>) -> Vec<Group> {
    a.groups().filter(|(g, p)| *p != b.get(*g)).map(|(g, _)| g).collect()
}

#[test]
fn phases_touch_only_their_groups() {
    let (cfg, d) = (small(), data());
    let mut s = TrainState::init(&cfg).unwrap();
    let mut snaps = vec![(None, s.params.clone())];
    train_step_observed(&mut s, &cfg, &d, &mut |ph, p| snaps.push((Some(ph), p.clone()))).unwrap();
    assert_eq!(changed(&snaps[0].1, &snaps[1].1), vec![Group::ContentEncoder]);
    assert_eq!(
        changed(&snaps[1].1, &snaps[2].1),
        vec![Group::ContentEncoder, Group::PoseEncoder, Group::SourceGenerator, Group::TargetGenerator]
    );
    assert_eq!(
        changed(&snaps[2].1, &snaps[3].1),
        vec![Group::SourceDiscriminator, Group::TargetDiscriminator, Group::PoseDiscriminator]
    );
}

#[test]
fn disabled_pose_loss_freezes_the_pose_discriminator() {
    let mut cfg = small();
    cfg.ablation.use_pose = false;
    let d = data();
    let mut s = TrainState::init(&cfg).unwrap();
    let before = s.params.get(Group::PoseDiscriminator).clone();
    let r = train_step(&mut s, &cfg, &d).unwrap();
    assert!(r.pose_s.is_none() && r.pose_t.is_none());
    assert_eq!(s.params.get(Group::PoseDiscriminator), &before);
}

#[test]
fn triplet_only_trains_just_the_content_encoder() {
    let mut cfg = small();
    cfg.ablation = Ablation { use_mmd: false, use_rec: false, use_pose: false, use_domain_adv: false, ..Ablation::default() };
    let d = data();
    let mut s = TrainState::init(&cfg).unwrap();
    let before = s.params.clone();
    let r = train_step(&mut s, &cfg, &d).unwrap();
    assert_eq!(r.terms().iter().map(|t| t.0).collect::<Vec<_>>(), vec!["triplet", "encoder_total"]);
    assert_eq!(changed(&before, &s.params), vec![Group::ContentEncoder]);
}

#[test]
fn split_pose_discriminators_are_both_trained() {
    let mut cfg = small();
    cfg.ablation.share_dp = false;
    let d = data();
    let mut s = TrainState::init(&cfg).unwrap();
    let before = s.params.clone();
    train_step(&mut s, &cfg, &d).unwrap();
    let c = changed(&before, &s.params);
    assert!(c.contains(&Group::PoseDiscriminator) && c.contains(&Group::TargetPoseDiscriminator));
}

#[test]
fn literal_signs_and_extra_loops_run() {
    let mut cfg = small();
    cfg.adversarial = AdversarialForm::Literal;
    cfg.generator_loops = 2;
    cfg.discriminator_loops = 2;
    let d = data();
    let mut s = TrainState::init(&cfg).unwrap();
    let r = train_step(&mut s, &cfg, &d).unwrap();
    assert!(r.first_non_finite().is_none());
    assert_eq!(s.optimizers[&(Phase::Generator, Group::PoseEncoder)].step, 2);
    assert_eq!(s.optimizers[&(Phase::Discriminator, Group::SourceDiscriminator)].step, 2);
}

#[test]
fn nan_parameters_abort_naming_the_term() {
    let (cfg, d) = (small(), data());
    let mut s = TrainState::init(&cfg).unwrap();
    for (_, t) in s.params.get_mut(Group::SourceGenerator).iter_mut() {
        t.data_mut().iter_mut().for_each(|v| *v = f32::NAN);
    }
    match train_step(&mut s, &cfg, &d) {
        Err(Error::NonFinite { term, step }) => {
            assert_eq!(step, 0);
            assert_eq!(term, "rec_s");
        }
        other => panic!("expected a non-finite abort, got {other:?}"),
    }
}

#[test]
fn checkpoints_round_trip_and_resume_exactly() {
    let (mut cfg, d) = (small(), data());
    cfg.checkpoint_every = 2;
    let mut sink = MemorySink::default();
    let full = train(&cfg, &d, None, &mut sink).unwrap();
    assert_eq!(sink.checkpoints.iter().map(|c| c.0).collect::<Vec<_>>(), vec![2, 4]);
    let (c2, mid) = checkpoint::from_bytes(&sink.checkpoints[0].1, Path::new("mem")).unwrap();
    assert_eq!(c2, cfg);
    assert_eq!(checkpoint::to_bytes(&mid, &cfg).unwrap(), sink.checkpoints[0].1);
    let resumed = train(&cfg, &d, Some(mid), &mut NullSink).unwrap();
    assert_eq!(resumed.state, full.state);
    assert_eq!(resumed.history[..], full.history[2..]);
    let (_, last) = checkpoint::from_bytes(&sink.checkpoints[1].1, Path::new("mem")).unwrap();
    assert_eq!(last, full.state);
}

#[test]
fn zero_iterations_checkpoint_the_initial_state() {
    let (mut cfg, d) = (small(), data());
    cfg.iterations = 0;
    let mut sink = MemorySink::default();
    let out = train(&cfg, &d, None, &mut sink).unwrap();
    assert!(out.history.is_empty());
    let init = TrainState::init(&cfg).unwrap();
    assert_eq!(sink.checkpoints, vec![(0, checkpoint::to_bytes(&init, &cfg).unwrap())]);
}

#[test]
fn config_validation() {
    let bad = [
        TrainConfig { lambda_rec: -1.0, ..TrainConfig::default() },
        TrainConfig { batch_source: 1, ..TrainConfig::default() },
        TrainConfig { generator_loops: 0, ..TrainConfig::default() },
        TrainConfig { lr_encoder: 0.0, ..TrainConfig::default() },
    ];
    for c in bad {
        assert!(matches!(c.validate(), Err(Error::InvalidArgument(_))));
    }
    let text = toml::to_string(&TrainConfig::default()).unwrap();
    assert_eq!(toml::from_str::<TrainConfig>(&text).unwrap(), TrainConfig::default());
}

#[test]
fn resume_rejects_mismatched_structure() {
    let (cfg, d) = (small(), data());
    let s = TrainState::init(&cfg).unwrap();
    let mut other = cfg.clone();
    other.ablation.share_dp = false;
    assert!(train(&other, &d, Some(s.clone()), &mut NullSink).is_err());
    let mut wider = cfg.clone();
    wider.net.content_dim = 32;
    assert!(train(&wider, &d, Some(s), &mut NullSink).is_err());
}

#[test]
fn run_dir_sink_writes_logs_checkpoints_and_grids() {
    let (mut cfg, d) = (small(), data());
    cfg.grid_every = 2;
    cfg.iterations = 2;
    let dir = tempfile::tempdir().unwrap();
    let mut sink = RunDirSink::new(dir.path());
    train(&cfg, &d, None, &mut sink).unwrap();
    let log = std::fs::read_to_string(dir.path().join("losses.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 2);
    let ck = checkpoint::latest_in(&dir.path().join("checkpoints")).unwrap().unwrap();
    assert!(ck.ends_with("step_000002.safetensors"));
    assert!(dir.path().join("grids/grid_step000002_t2s.png").exists());
    assert!(dir.path().join("grids/grid_step000000_s2s.png").exists());

    // resuming at the final step keeps the log intact
    let (c, s) = checkpoint::load(&ck).unwrap();
    let mut more = c.clone();
    more.iterations = 3;
    train(&more, &d, Some(s), &mut RunDirSink::new(dir.path())).unwrap();
    let log2 = std::fs::read_to_string(dir.path().join("losses.jsonl")).unwrap();
    assert!(log2.starts_with(&log));
    assert_eq!(log2.lines().count(), 3);
}
