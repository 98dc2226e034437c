use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use pdanet::datagen::load_dataset;
use pdanet::evaluator::{gaussian_features, split_domain, EvalReport};
use pdanet::trainer::checkpoint;
use sha2::{Digest, Sha256};

const TINY: &str = r#"
[data]
identities = 4
images_per_identity = 3
seed = 5

[train]
iterations = 10
batch_source = 3
batch_target = 3
checkpoint_every = 5
grid_every = 0

[train.net]
content_dim = 16
pose_dim = 8
content_widths = [4, 8, 8, 8]
pose_widths = [4, 4, 4, 4]
generator_widths = [8, 8, 4, 4]
domain_disc_widths = [4, 8]
pose_disc_widths = [4, 8, 8]

[eval.probes]
per_domain = 4
"#;

fn pdanet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pdanet"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

struct Fixture {
    dir: tempfile::TempDir,
}

impl Fixture {
    fn new() -> Self {
        let f = Self { dir: tempfile::tempdir().unwrap() };
        std::fs::write(f.config(), TINY).unwrap();
        f
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn config(&self) -> PathBuf {
        self.path("config.toml")
    }

    fn data(&self) -> PathBuf {
        let d = self.path("data");
        if !d.exists() {
            let o = pdanet(&["synth-data", "-c", p(&self.config()), "--out", p(&d)]);
            assert!(o.status.success(), "{}", stderr(&o));
        }
        d
    }

    fn train(&self, run: &str, extra: &[&str]) -> Output {
        let run = self.path(run);
        let (cfg, data) = (self.config(), self.data());
        let mut args = vec!["train", "-c", p(&cfg), "--data", p(&data), "--run-dir", p(&run)];
        args.extend_from_slice(extra);
        pdanet(&args)
    }
}

fn digest_dir(dir: &Path) -> BTreeMap<String, String> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                out.insert(rel, hex::encode(Sha256::digest(std::fs::read(&path).unwrap())));
            }
        }
    }
    out
}

#[test]
fn synth_data_reports_counts_and_is_reproducible() {
    let f = Fixture::new();
    std::fs::write(f.config(), TINY.replace("identities = 4\nimages_per_identity = 3", "identities = 10\nimages_per_identity = 4")).unwrap();
    let (a, b) = (f.path("a"), f.path("b"));
    let o = pdanet(&["synth-data", "-c", p(&f.config()), "--out", p(&a)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("40 source / 40 target"), "{}", stdout(&o));
    assert!(pdanet(&["synth-data", "-c", p(&f.config()), "--out", p(&b)]).status.success());
    let da = digest_dir(&a);
    assert_eq!(da.len(), 82);
    assert_eq!(da, digest_dir(&b));

    let again = pdanet(&["synth-data", "-c", p(&f.config()), "--out", p(&a)]);
    assert_eq!(again.status.code(), Some(1));
    assert!(stderr(&again).contains("--force"));
    assert!(pdanet(&["synth-data", "-c", p(&f.config()), "--out", p(&a), "--force"]).status.success());
    assert_eq!(digest_dir(&a), da);
}

#[test]
fn config_errors_name_the_field() {
    let f = Fixture::new();
    std::fs::write(f.config(), "[data]\nidentitees = 3\n").unwrap();
    let o = pdanet(&["synth-data", "-c", p(&f.config()), "--out", p(&f.path("x"))]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("identitees"), "{}", stderr(&o));

    std::fs::write(f.config(), "[train]\nmargin = \"wide\"\n").unwrap();
    let o = pdanet(&["synth-data", "-c", p(&f.config()), "--out", p(&f.path("x"))]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("margin"), "{}", stderr(&o));

    assert_eq!(pdanet(&["no-such-command"]).status.code(), Some(1));
    assert_eq!(pdanet(&["--help"]).status.code(), Some(0));
}

#[test]
fn train_writes_the_run_directory() {
    let f = Fixture::new();
    let o = f.train("run", &["--set", "train.ablation.use_domain_adv=false"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let run = f.path("run");
    let log = std::fs::read_to_string(run.join("losses.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 10);
    assert_eq!(std::fs::read(run.join("config.toml")).unwrap(), TINY.as_bytes());
    let resolved = std::fs::read_to_string(run.join("config.resolved.toml")).unwrap();
    assert!(resolved.contains("use_domain_adv = false"), "{resolved}");
    let ck = checkpoint::latest_in(&run.join("checkpoints")).unwrap().unwrap();
    assert!(ck.ends_with("step_000010.safetensors"));
    let (cfg, _) = checkpoint::load(&ck).unwrap();
    assert!(!cfg.ablation.use_domain_adv);

    let refused = f.train("run", &[]);
    assert_eq!(refused.status.code(), Some(1));
}

#[test]
fn resume_continues_from_the_latest_checkpoint() {
    let f = Fixture::new();
    assert!(f.train("whole", &[]).status.success());
    let part = f.train("part", &["--set", "train.iterations=5"]);
    assert!(part.status.success(), "{}", stderr(&part));
    let resumed = f.train("part", &["--resume"]);
    assert!(resumed.status.success(), "{}", stderr(&resumed));

    let log = |run: &str| std::fs::read_to_string(f.path(run).join("losses.jsonl")).unwrap();
    assert_eq!(log("whole"), log("part"));
    let last = |run: &str| checkpoint::load(&f.path(run).join("checkpoints").join(checkpoint::file_name(10))).unwrap().1;
    assert_eq!(last("whole"), last("part"));

    let none = f.train("fresh", &["--resume"]);
    assert_eq!(none.status.code(), Some(1));
}

#[test]
fn missing_dataset_and_divergence_exit_nonzero() {
    let f = Fixture::new();
    let missing = f.path("nowhere");
    let o = pdanet(&["train", "-c", p(&f.config()), "--data", p(&missing), "--run-dir", p(&f.path("r"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains(p(&missing)), "{}", stderr(&o));

    let o = f.train("nan", &["--set", "train.lr_generator=1e30", "--set", "train.clip_norm=1e30"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("at step"), "{}", stderr(&o));
}

#[test]
fn eval_oracle_features_hit_the_ceiling() {
    let f = Fixture::new();
    let out = f.path("oracle");
    let o = pdanet(&["eval", "--data", p(&f.data()), "--features", "oracle", "--out", p(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let r: EvalReport = serde_json::from_str(&std::fs::read_to_string(out.join("eval.json")).unwrap()).unwrap();
    assert_eq!((r.rank1, r.map), (1.0, 1.0));
    assert!(std::fs::read_to_string(out.join("eval.txt")).unwrap().contains("100.0"));
}

/// Brute-force rank-1 and mAP: full distance sort per query, AP from the
/// ranks of the relevant items.
fn brute_force(q: &[Vec<f64>], g: &[Vec<f64>], ql: &[u32], gl: &[u32]) -> (f64, f64) {
    let (mut r1, mut map) = (0.0, 0.0);
    for (qi, qv) in q.iter().enumerate() {
        let mut order: Vec<(f64, usize)> =
            g.iter().enumerate().map(|(j, gv)| (qv.iter().zip(gv).map(|(a, b)| (a - b).powi(2)).sum::<f64>(), j)).collect();
        order.sort_by(|a, b| a.partial_cmp(b).unwrap());
        if gl[order[0].1] == ql[qi] {
            r1 += 1.0;
        }
        let ranks: Vec<usize> = order.iter().enumerate().filter(|(_, (_, j))| gl[*j] == ql[qi]).map(|(r, _)| r + 1).collect();
        map += ranks.iter().enumerate().map(|(i, &r)| (i + 1) as f64 / r as f64).sum::<f64>() / ranks.len() as f64;
    }
    (r1 / q.len() as f64, map / q.len() as f64)
}

#[test]
fn eval_random_features_match_a_brute_force_pipeline() {
    let f = Fixture::new();
    let out = f.path("random");
    let o = pdanet(&[
        "eval", "--data", p(&f.data()), "--features", "random", "--feature-dim", "5", "--feature-seed", "11", "--out", p(&out),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let r: EvalReport = serde_json::from_str(&std::fs::read_to_string(out.join("eval.json")).unwrap()).unwrap();

    let ds = load_dataset(&f.data()).unwrap();
    let t = &ds.target;
    let feats = gaussian_features(t.len(), 5, 11);
    let row = |i: usize| feats.data()[i * 5..(i + 1) * 5].to_vec();
    let split = split_domain(t, 2).unwrap();
    let q: Vec<Vec<f64>> = split.queries.iter().map(|&i| row(i)).collect();
    let g: Vec<Vec<f64>> = split.gallery.iter().map(|&i| row(i)).collect();
    let ql: Vec<u32> = split.queries.iter().map(|&i| t.identity(i)).collect();
    let gl: Vec<u32> = split.gallery.iter().map(|&i| t.identity(i)).collect();
    let (r1, map) = brute_force(&q, &g, &ql, &gl);
    assert!((r.rank1 - r1).abs() < 1e-12 && (r.map - map).abs() < 1e-12, "{} {} vs {r1} {map}", r.rank1, r.map);
}

#[test]
fn eval_and_translate_a_checkpoint() {
    let f = Fixture::new();
    assert!(f.train("run", &["--set", "train.iterations=2"]).status.success());
    let ck = f.path("run").join("checkpoints").join(checkpoint::file_name(2));

    let o = pdanet(&["eval", "-c", p(&f.config()), "--checkpoint", p(&ck), "--data", p(&f.data())]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("Rank-1"));
    let r: EvalReport = serde_json::from_str(&std::fs::read_to_string(ck.parent().unwrap().join("eval.json")).unwrap()).unwrap();
    assert!(r.diagnostics.contains_key("pose_consistency"));

    let png = f.path("grid.png");
    let o = pdanet(&[
        "translate", "--checkpoint", p(&ck), "--data", p(&f.data()), "--out", p(&png), "--routes", "s2t,t2s", "--inputs", "0,3",
        "--poses", "1,2,4",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let img = image::open(&png).unwrap();
    assert_eq!((img.height(), img.width()), (2 * 3 * 64, 4 * 32));
    let bad = pdanet(&["translate", "--checkpoint", p(&ck), "--data", p(&f.data()), "--out", p(&png), "--inputs", "99"]);
    assert_eq!(bad.status.code(), Some(1));
}

#[test]
fn eval_rejects_mismatched_dims_and_empty_galleries() {
    let f = Fixture::new();
    assert!(f.train("run", &["--set", "train.iterations=0"]).status.success());
    let ck = f.path("run").join("checkpoints").join(checkpoint::file_name(0));
    let small = f.path("small");
    let o = pdanet(&[
        "synth-data", "-c", p(&f.config()), "--out", p(&small), "--set", "data.height=32", "--set", "data.width=16",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = pdanet(&["eval", "--checkpoint", p(&ck), "--data", p(&small)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("64x32") && stderr(&o).contains("32x16"), "{}", stderr(&o));

    let pairs = f.path("pairs");
    let o = pdanet(&["synth-data", "-c", p(&f.config()), "--out", p(&pairs), "--set", "data.images_per_identity=2"]);
    assert!(o.status.success());
    let o = pdanet(&["eval", "--data", p(&pairs), "--features", "oracle"]);
    assert_ne!(o.status.code(), Some(0));
    assert!(stderr(&o).contains("gallery"), "{}", stderr(&o));
}

#[test]
fn ablate_one_variant_gives_one_reproducible_row() {
    let f = Fixture::new();
    let run = |name: &str| {
        let dir = f.path(name);
        let o = pdanet(&[
            "ablate", "-c", p(&f.config()), "--data", p(&f.data()), "--run-dir", p(&dir), "--variants", "no-pose", "--set",
            "train.iterations=2",
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
        std::fs::read_to_string(dir.join("ablation.txt")).unwrap()
    };
    let a = run("a");
    assert_eq!(a.lines().count(), 2);
    assert!(a.lines().nth(1).unwrap().starts_with("w/o L_pose"));
    assert_eq!(a, run("b"));
    assert!(f.path("a/no-pose/losses.jsonl").exists());

    let bad = pdanet(&["ablate", "--data", p(&f.data()), "--run-dir", p(&f.path("c")), "--variants", "bogus"]);
    assert_eq!(bad.status.code(), Some(1));
}

#[test]
fn run_root_comes_from_the_environment() {
    let f = Fixture::new();
    let root = f.path("root");
    let o = Command::new(env!("CARGO_BIN_EXE_pdanet"))
        .args(["train", "-c", p(&f.config()), "--data", p(&f.data()), "--set", "train.iterations=1"])
        .env("PDANET_RUN_ROOT", &root)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(root.join("train/losses.jsonl").exists());
}
