//! Acceptance suite. Prints one PASS/FAIL line per criterion.
//!
//! Criteria 5 to 7 measure how well the trained model transfers on the
//! synthetic benchmark. Their outcome is reported but does not fail the run;
//! every other criterion is a correctness check and does.

mod common;

use std::fmt::Write as _;
use std::time::{Duration, Instant};

use autograd::{Graph, Tensor};
use pdanet::ablation::{random_features, run_variant, Variant, VariantResult};
use pdanet::datagen::{synthesize_dataset, Dataset, Domain, SynthSpec};
use pdanet::evaluator::ProbeSpec;
use pdanet::losses::{
    domain_adversarial_loss, mmd_loss, pose_adversarial_loss, reconstruction_loss_source, reconstruction_loss_target,
    triplet_loss, Estimator, KernelSpec, SourcePoseTuple, TargetPoseTuple,
};
use pdanet::networks::{forward, Group, ModelParams, NetConfig};
use pdanet::trainer::{checkpoint, train, train_step_observed, NullSink, Phase, RunDirSink, TrainConfig, TrainState};
use pdanet::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(check: Result<String, String>) -> Outcome {
    match check {
        Ok(detail) => Outcome { pass: true, detail },
        Err(detail) => Outcome { pass: false, detail },
    }
}

fn secs(d: Duration) -> String {
    format!("{:.1} s", d.as_secs_f64())
}

// 1 -------------------------------------------------------------------------

fn rows(d: usize, v: &[f64]) -> Tensor<f64> {
    Tensor::from_vec(vec![v.len() / d, d], v.to_vec()).unwrap()
}

fn image(offset: f64) -> Tensor<f64> {
    let data = (0..2 * 3 * 4 * 2).map(|i| ((i as f64) * 0.37).sin() * 0.5 + offset).collect();
    Tensor::from_vec(vec![2, 3, 4, 2], data).unwrap()
}

fn loss_oracles() -> Result<String, String> {
    let start = Instant::now();
    let e = |r: pdanet::Result<f64>| r.map_err(|e| e.to_string());
    let one = KernelSpec::new(vec![1.0], Estimator::Biased).unwrap();
    let trip = |a: [f64; 2], p: [f64; 2], n: [f64; 2]| triplet_loss(&rows(2, &a), &rows(2, &p), &rows(2, &n), 0.5);
    let x = image(0.0);
    let dom = domain_adversarial_loss(&[0.5; 4], &[0.5; 4], &[0.5; 4]).map_err(|e| e.to_string())?;
    let half = || Tensor::full(vec![2, 1, 4, 2], 0.5);
    let pose = pose_adversarial_loss(
        &SourcePoseTuple { real: half(), recon: half(), mismatched: Some(half()), pose_guided: Some(half()) },
        &TargetPoseTuple { real: half(), recon: half() },
    )
    .map_err(|e| e.to_string())?;
    let cases: Vec<(&str, f64, f64)> = vec![
        ("mmd of {0} vs {2}", e(mmd_loss(&rows(1, &[0.0]), &rows(1, &[2.0]), &one))?, 1.7293294335267746),
        ("triplet, negative far", e(trip([0.0, 0.0], [0.3, 0.0], [1.0, 0.0]))?, 0.0),
        ("triplet, inside margin", e(trip([0.0, 0.0], [0.6, 0.0], [0.8, 0.0]))?, 0.3),
        ("triplet, pos == neg", e(trip([0.0, 0.0], [0.4, 0.3], [0.4, 0.3]))?, 0.5),
        ("source rec, +0.5", e(reconstruction_loss_source(&image(0.5), &x, &x, &x))?, 0.5),
        ("target rec, +0.25", e(reconstruction_loss_target(&image(0.25), &x))?, 0.25),
        ("domain d_objective at 0.5", dom.d_objective, -2.0794415416798357),
        ("domain g_objective at 0.5", dom.g_objective, 1.3862943611198906),
        ("pose d_objective at 0.5", pose.d_objective, -4.1588830833596715),
        ("pose g_objective at 0.5", pose.g_objective, 2.0794415416798357),
    ];
    let mut worst = 0.0f64;
    for (name, got, want) in &cases {
        let err = (got - want).abs();
        if err.is_nan() || err > 1e-6 {
            return Err(format!("{name}: {got} vs {want}"));
        }
        worst = worst.max(err);
    }
    let invalid = |r: pdanet::Result<f64>| matches!(r, Err(Error::InvalidArgument(_)));
    let empty = Tensor::<f64>::zeros(vec![0, 1]);
    let unbiased = KernelSpec::new(vec![1.0], Estimator::Unbiased).unwrap();
    let errors = [
        ("empty MMD batch", invalid(mmd_loss(&empty, &rows(1, &[1.0]), &one))),
        ("unbiased MMD on one sample", invalid(mmd_loss(&rows(1, &[1.0]), &rows(1, &[2.0]), &unbiased))),
        ("triplet dimension mismatch", invalid(triplet_loss(&rows(2, &[0.0; 2]), &rows(2, &[0.0; 2]), &rows(3, &[0.0; 3]), 0.5))),
    ];
    if let Some((name, _)) = errors.iter().find(|(_, ok)| !ok) {
        return Err(format!("{name} is not rejected as an invalid argument"));
    }
    let t = start.elapsed();
    if t > Duration::from_secs(10) {
        return Err(format!("took {}", secs(t)));
    }
    Ok(format!("{} values, max error {worst:.1e}, {} error cases, {}", cases.len(), errors.len(), secs(t)))
}

// 2 -------------------------------------------------------------------------

fn gradient_checks() -> Result<String, String> {
    let start = Instant::now();
    let (checks, verdict) = common::gradient_suite();
    verdict?;
    let t = start.elapsed();
    if t > Duration::from_secs(120) {
        return Err(format!("took {}", secs(t)));
    }
    let worst = checks.iter().map(|c| c.rel_error()).fold(0.0, f64::max);
    Ok(format!(
        "{} terms, {} directional checks, max rel error {worst:.1e} (tol {:.0e}), {}",
        common::TERMS.len(),
        checks.len(),
        common::GRAD_RTOL,
        secs(t)
    ))
}

// 3, 4 ----------------------------------------------------------------------

fn mmd_properties() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for i in 0..200 {
        common::check_mmd_instance(&mut rng).map_err(|e| format!("instance {i}: {e}"))?;
    }
    Ok("200 instances: non-negative, zero on identical batches, swap symmetric, permutation invariant".into())
}

fn retrieval_oracle() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for i in 0..500 {
        common::check_retrieval_instance(&common::random_retrieval(&mut rng)).map_err(|e| format!("instance {i}: {e}"))?;
    }
    Ok("500 instances match brute-force ranking, CMC and AP to 1e-9; CMC monotone".into())
}

// 5, 6, 7 -------------------------------------------------------------------

struct Benchmark {
    random: VariantResult,
    runs: Vec<(Variant, VariantResult, Duration)>,
}

impl Benchmark {
    fn get(&self, v: Variant) -> &VariantResult {
        &self.runs.iter().find(|r| r.0 == v).expect("variant was run").1
    }

    fn time(&self, v: Variant) -> Duration {
        self.runs.iter().find(|r| r.0 == v).expect("variant was run").2
    }

    fn rank1(&self, v: Variant) -> f64 {
        100.0 * self.get(v).report.rank1
    }
}

fn run_benchmark(data: &Dataset) -> Result<Benchmark, String> {
    let base = TrainConfig::default();
    let probes = ProbeSpec::default();
    let random = random_features(&base, data, &probes).map_err(|e| e.to_string())?;
    let mut runs = Vec::new();
    for v in [Variant::Full, Variant::Baseline, Variant::NoMmd, Variant::NoPose] {
        let start = Instant::now();
        let r = run_variant(&base, data, v, &probes, &mut NullSink).map_err(|e| format!("{v}: {e}"))?;
        let t = start.elapsed();
        println!(
            "  {:<20} Rank-1 {:5.1}%  mAP {:5.1}%  pose consistency {:5.1}%  ({})",
            v.label(),
            100.0 * r.report.rank1,
            100.0 * r.report.map,
            100.0 * r.pose_consistency,
            secs(t)
        );
        runs.push((v, r, t));
    }
    println!(
        "  {:<20} Rank-1 {:5.1}%  mAP {:5.1}%  pose consistency {:5.1}%",
        "random features",
        100.0 * random.report.rank1,
        100.0 * random.report.map,
        100.0 * random.pose_consistency
    );
    Ok(Benchmark { random, runs })
}

fn cross_domain(b: &Benchmark) -> Result<String, String> {
    let full = b.rank1(Variant::Full);
    let random = 100.0 * b.random.report.rank1;
    let base = b.rank1(Variant::Baseline);
    let t = b.time(Variant::Full) + b.time(Variant::Baseline);
    let detail = format!(
        "full {full:.1}% vs random {random:.1}% (+{:.1}pp) and triplet-only {base:.1}% (+{:.1}pp), need +15pp; training {}",
        full - random,
        full - base,
        secs(t)
    );
    if full >= random + 15.0 && full >= base + 15.0 && t <= Duration::from_secs(30 * 60) {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn ablation_order(b: &Benchmark) -> Result<String, String> {
    const TIE: f64 = 1.0;
    let (full, no_mmd, base, no_pose) =
        (b.rank1(Variant::Full), b.rank1(Variant::NoMmd), b.rank1(Variant::Baseline), b.rank1(Variant::NoPose));
    let detail = format!("Rank-1 full {full:.1}%, w/o MMD {no_mmd:.1}%, baseline {base:.1}%, w/o pose {no_pose:.1}%");
    if full + TIE >= no_mmd && no_mmd + TIE >= base && full + TIE >= no_pose {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn disentanglement(b: &Benchmark) -> Result<String, String> {
    let (full, no_pose) = (b.get(Variant::Full).pose_consistency, b.get(Variant::NoPose).pose_consistency);
    let detail = format!("pose consistency full {:.1}% vs w/o pose {:.1}%", 100.0 * full, 100.0 * no_pose);
    if full > no_pose {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// 8 -------------------------------------------------------------------------

fn read(path: &std::path::Path) -> Result<Vec<u8>, String> {
    std::fs::read(path).map_err(|e| format!("{}: {e}", path.display()))
}

fn determinism(data: &Dataset) -> Result<String, String> {
    let start = Instant::now();
    let cfg = TrainConfig { iterations: 100, checkpoint_every: 50, grid_every: 0, ..TrainConfig::default() };
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let run = |name: &str, resume: Option<TrainState>| -> Result<std::path::PathBuf, String> {
        let dir = tmp.path().join(name);
        train(&cfg, data, resume, &mut RunDirSink::new(&dir)).map_err(|e| e.to_string())?;
        Ok(dir)
    };
    let (a, b) = (run("a", None)?, run("b", None)?);
    let ckpt = |dir: &std::path::Path, step| dir.join("checkpoints").join(checkpoint::file_name(step));
    let losses = |dir: &std::path::Path| read(&dir.join("losses.jsonl"));
    if losses(&a)? != losses(&b)? {
        return Err("loss logs of identical runs differ".into());
    }
    for step in [50, 100] {
        if read(&ckpt(&a, step))? != read(&ckpt(&b, step))? {
            return Err(format!("checkpoints at step {step} differ"));
        }
    }
    let (_, mid) = checkpoint::load(&ckpt(&a, 50)).map_err(|e| e.to_string())?;
    let c = run("c", Some(mid))?;
    if read(&ckpt(&c, 100))? != read(&ckpt(&a, 100))? {
        return Err("resuming at step 50 gives a different final checkpoint".into());
    }
    let log_a = String::from_utf8(losses(&a)?).map_err(|e| e.to_string())?;
    let log_c = String::from_utf8(losses(&c)?).map_err(|e| e.to_string())?;
    let tail: Vec<&str> = log_a.lines().skip(50).collect();
    if log_c.lines().collect::<Vec<_>>() != tail {
        return Err("resumed loss log differs from steps 50..100 of the uninterrupted run".into());
    }
    Ok(format!("two 100-step runs bit-identical (log + 2 checkpoints); resume at 50 matches; {}", secs(start.elapsed())))
}

// 9 -------------------------------------------------------------------------

fn tiny_data() -> Dataset {
    let spec = SynthSpec { identities: 4, images_per_identity: 3, height: 16, width: 8, sigma: 1.0, ..SynthSpec::default() };
    synthesize_dataset(&spec).expect("tiny dataset")
}

fn changed(a: &ModelParams<f32>, b: &ModelParams<f32>) -> Vec<Group> {
    a.groups().filter(|(g, p)| *p != b.get(*g)).map(|(g, _)| g).collect()
}

fn structure() -> Result<String, String> {
    let mut notes = String::new();
    // shared D_P
    let cfg = TrainConfig { batch_source: 3, batch_target: 3, net: NetConfig::tiny(), ..TrainConfig::default() };
    let mut state = TrainState::init(&cfg).map_err(|e| e.to_string())?;
    let p = &state.params;
    let (ps, pt) = (p.pose_disc_group(Domain::Source), p.pose_disc_group(Domain::Target));
    if ps != pt || p.has(Group::TargetPoseDiscriminator) || p.groups().count() != 7 {
        return Err("shared D_P is not a single parameter group".into());
    }
    let pose_opts = state.optimizers.keys().filter(|(_, g)| matches!(g, Group::PoseDiscriminator | Group::TargetPoseDiscriminator)).count();
    if pose_opts != 1 {
        return Err(format!("{pose_opts} optimizer states for the shared D_P"));
    }
    let split = TrainState::init(&TrainConfig { ablation: pdanet::trainer::Ablation { share_dp: false, ..Default::default() }, ..cfg.clone() })
        .map_err(|e| e.to_string())?;
    if split.params.pose_disc_group(Domain::Source) == split.params.pose_disc_group(Domain::Target) {
        return Err("share_dp = false still shares D_P".into());
    }
    notes.push_str("shared D_P is one group with one optimizer");

    // phase isolation
    let data = tiny_data();
    let mut snaps = vec![state.params.clone()];
    train_step_observed(&mut state, &cfg, &data, &mut |_, p| snaps.push(p.clone())).map_err(|e| e.to_string())?;
    let enc = changed(&snaps[0], &snaps[1]);
    if enc != [Group::ContentEncoder] {
        return Err(format!("encoder phase changed {enc:?}"));
    }
    let gen: Vec<Group> = changed(&snaps[1], &snaps[2]);
    if gen.iter().any(|g| !Phase::Generator.groups(&snaps[1]).contains(g)) {
        return Err(format!("generator phase changed {gen:?}"));
    }
    let disc = changed(&snaps[2], &snaps[3]);
    if disc != [Group::SourceDiscriminator, Group::TargetDiscriminator, Group::PoseDiscriminator] {
        return Err(format!("discriminator phase changed {disc:?}"));
    }
    notes.push_str("; encoder phase touches only E_C");

    // generator range
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for seed in 0..8u64 {
        let net = NetConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ModelParams::<f64>::init(&net, true, &mut rng).map_err(|e| e.to_string())?;
        for group in [Group::SourceGenerator, Group::TargetGenerator] {
            for (_, t) in params.get_mut(group).iter_mut() {
                t.data_mut().iter_mut().for_each(|x| *x *= 4.0);
            }
        }
        let mut random = |shape: [usize; 2]| {
            let data = (0..shape[0] * shape[1]).map(|_| { let z: f64 = StandardNormal.sample(&mut rng); 10.0 * z }).collect();
            Tensor::from_vec(shape.to_vec(), data).unwrap()
        };
        let (vp, vc) = (random([4, net.pose_dim]), random([4, net.content_dim]));
        for group in [Group::SourceGenerator, Group::TargetGenerator] {
            let mut g = Graph::new();
            let b = params.get(group).bind(&mut g, false);
            let (vp, vc) = (g.constant(vp.clone()), g.constant(vc.clone()));
            let out = forward::generator(&mut g, &b, &net, vp, vc);
            for &v in g.value(out).data() {
                if !(-1.0..=1.0).contains(&v) {
                    return Err(format!("generator output {v} outside [-1, 1]"));
                }
                lo = lo.min(v);
                hi = hi.max(v);
            }
        }
    }
    let _ = write!(notes, "; generator outputs in [{lo:.3}, {hi:.3}] over 16 random draws");
    Ok(notes)
}

// ---------------------------------------------------------------------------

fn report(n: usize, name: &str, o: &Outcome, reported_only: bool) {
    let verdict = if o.pass { "PASS" } else { "FAIL" };
    let note = if !o.pass && reported_only { " (reported, not enforced)" } else { "" };
    println!("criterion {n} [{name}]: {verdict}{note}: {}", o.detail);
}

fn main() {
    let mut hard_failures = Vec::new();
    let mut check = |n: usize, name: &str, o: Outcome, reported_only: bool| {
        report(n, name, &o, reported_only);
        if !o.pass && !reported_only {
            hard_failures.push(n);
        }
    };
    check(1, "loss oracles", outcome(loss_oracles()), false);
    check(2, "gradient checks", outcome(gradient_checks()), false);
    check(3, "MMD properties", outcome(mmd_properties()), false);
    check(4, "retrieval oracle", outcome(retrieval_oracle()), false);
    check(9, "structural invariants", outcome(structure()), false);

    let data = synthesize_dataset(&SynthSpec::default()).expect("default dataset");
    check(8, "determinism", outcome(determinism(&data)), false);

    println!("training the benchmark variants for {} iterations each", TrainConfig::default().iterations);
    match run_benchmark(&data) {
        Ok(b) => {
            check(5, "cross-domain Rank-1", outcome(cross_domain(&b)), true);
            check(6, "ablation ordering", outcome(ablation_order(&b)), true);
            check(7, "pose disentanglement", outcome(disentanglement(&b)), true);
        }
        Err(e) => {
            for (n, name) in [(5, "cross-domain Rank-1"), (6, "ablation ordering"), (7, "pose disentanglement")] {
                check(n, name, Outcome { pass: false, detail: format!("training failed: {e}") }, false);
            }
        }
    }
    if !hard_failures.is_empty() {
        eprintln!("failed criteria: {hard_failures:?}");
        std::process::exit(1);
    }
}
