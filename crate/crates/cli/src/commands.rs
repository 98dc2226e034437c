use std::path::Path;

use anyhow::{anyhow, Context};
use pdanet::ablation::{ablation_table, run_ablation, Variant};
use pdanet::datagen::{load_dataset, save_dataset, synthesize_dataset, Dataset, PersonImage, PoseMap};
use pdanet::evaluator::{
    evaluate_features, extract_features, gaussian_features, oracle_features, pose_consistency, split_domain, EvalReport,
};
use pdanet::networks::Model;
use pdanet::trainer::{checkpoint, train as run_training, RunDirSink};
use pdanet::translator::{render_grid, Grid, Route};

use crate::config::{self, Loaded};
use crate::{Classify, ConfigArgs, Failure, FeatureSource};

type Outcome = Result<(), Failure>;

/// Bad arguments are usage errors; everything else is a runtime failure.
fn core(e: pdanet::Error) -> Failure {
    match e {
        pdanet::Error::InvalidArgument(_) => Failure::Usage(e.into()),
        other => Failure::Runtime(other.into()),
    }
}

fn load_config(args: &ConfigArgs) -> Result<Loaded, Failure> {
    config::load(args.config.as_deref(), &args.overrides).usage()
}

fn load_data(dir: &Path) -> Result<Dataset, Failure> {
    load_dataset(dir).with_context(|| format!("loading dataset {}", dir.display())).runtime()
}

fn is_non_empty(dir: &Path) -> bool {
    std::fs::read_dir(dir).is_ok_and(|mut d| d.next().is_some())
}

/// Refuses a non-empty `dir` unless `force`, in which case it is cleared.
fn prepare_dir(dir: &Path, force: bool) -> Outcome {
    if is_non_empty(dir) {
        if !force {
            return Err(Failure::Usage(anyhow!("{} is not empty; pass --force to replace it", dir.display())));
        }
        std::fs::remove_dir_all(dir).with_context(|| format!("clearing {}", dir.display())).runtime()?;
    }
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display())).runtime()
}

fn check_dims(model: &Model, data: &Dataset) -> Outcome {
    let (h, w) = (model.config.height, model.config.width);
    if (h, w) != (data.height(), data.width()) {
        return Err(Failure::Usage(anyhow!(
            "checkpoint expects {h}x{w} images but the dataset has {}x{}",
            data.height(),
            data.width()
        )));
    }
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Outcome {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display())).runtime()
}

pub fn synth_data(args: &ConfigArgs, out: &Path, force: bool) -> Outcome {
    let cfg = load_config(args)?.config;
    prepare_dir(out, force)?;
    let ds = synthesize_dataset(&cfg.data).map_err(core)?;
    save_dataset(&ds, out).map_err(core)?;
    println!("{} source / {} target", ds.source.len(), ds.target.len());
    Ok(())
}

pub fn train(args: &ConfigArgs, data: &Path, run_dir: &Path, resume: bool, force: bool) -> Outcome {
    let loaded = load_config(args)?;
    let cfg = &loaded.config.train;
    let ds = load_data(data)?;
    let state = if resume {
        let dir = run_dir.join("checkpoints");
        let path = checkpoint::latest_in(&dir)
            .map_err(core)?
            .ok_or_else(|| Failure::Usage(anyhow!("no checkpoint to resume from in {}", dir.display())))?;
        let (_, state) = checkpoint::load(&path).map_err(core)?;
        log::info!("resuming from {} at step {}", path.display(), state.step);
        Some(state)
    } else {
        prepare_dir(run_dir, force)?;
        None
    };
    loaded.snapshot(run_dir).runtime()?;
    let out = run_training(cfg, &ds, state, &mut RunDirSink::new(run_dir)).map_err(|e| match e {
        pdanet::Error::NonFinite { .. } => Failure::Runtime(anyhow!("training aborted: {e}")),
        other => core(other),
    })?;
    println!("trained to step {} in {}", out.state.step, run_dir.display());
    Ok(())
}

pub fn eval(
    args: &ConfigArgs,
    checkpoint_path: Option<&Path>,
    data: &Path,
    out: Option<&Path>,
    features: FeatureSource,
    feature_dim: usize,
    feature_seed: u64,
) -> Outcome {
    let cfg = load_config(args)?.config;
    let ds = load_data(data)?;
    let target = &ds.target;
    let split = split_domain(target, cfg.eval.queries_per_identity).map_err(core)?;
    let report = match features {
        FeatureSource::Model => {
            let path = checkpoint_path.ok_or_else(|| Failure::Usage(anyhow!("--checkpoint is required for model features")))?;
            let (_, model) = checkpoint::load_model(path).map_err(core)?;
            check_dims(&model, &ds)?;
            let images: Vec<&PersonImage> = target.images().iter().collect();
            let f = extract_features(&model, &images).map_err(core)?;
            let mut report = evaluate_features(&f, target, &split).map_err(core)?;
            let pc = pose_consistency(&model, &ds, &cfg.eval.probes).map_err(core)?;
            report.diagnostics.insert("pose_consistency".into(), pc);
            report
        }
        FeatureSource::Oracle => evaluate_features(&oracle_features(target), target, &split).map_err(core)?,
        FeatureSource::Random => {
            if feature_dim == 0 {
                return Err(Failure::Usage(anyhow!("--feature-dim must be positive")));
            }
            let f = gaussian_features(target.len(), feature_dim, feature_seed);
            evaluate_features(&f, target, &split).map_err(core)?
        }
    };
    let label = match features {
        FeatureSource::Model => "model",
        FeatureSource::Oracle => "oracle",
        FeatureSource::Random => "random",
    };
    let table = EvalReport::table(&[(label, &report)]);
    print!("{table}");
    if let Some(pc) = report.diagnostics.get("pose_consistency") {
        println!("pose consistency {:.1}%", 100.0 * pc);
    }
    let dir = out.or_else(|| checkpoint_path.and_then(Path::parent));
    if let Some(dir) = dir {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display())).runtime()?;
        write_text(&dir.join("eval.json"), &(report.to_json() + "\n"))?;
        write_text(&dir.join("eval.txt"), &table)?;
    }
    Ok(())
}

/// Stacks grids with equal columns and cell size vertically.
fn stack(grids: Vec<Grid>) -> Grid {
    let mut it = grids.into_iter();
    let mut out = it.next().expect("at least one grid");
    for g in it {
        out.rows += g.rows;
        out.rgb.extend(g.rgb);
    }
    out
}

pub fn translate(checkpoint_path: &Path, data: &Path, out: &Path, routes: &[String], inputs: &[usize], poses: &[usize]) -> Outcome {
    let routes: Vec<Route> = if routes.is_empty() {
        Route::ALL.to_vec()
    } else {
        routes.iter().map(|r| r.parse()).collect::<Result<_, _>>().map_err(core)?
    };
    if inputs.is_empty() || poses.is_empty() {
        return Err(Failure::Usage(anyhow!("need at least one input and one pose")));
    }
    let (_, model) = checkpoint::load_model(checkpoint_path).map_err(core)?;
    let ds = load_data(data)?;
    check_dims(&model, &ds)?;
    let mut grids = Vec::new();
    for route in routes {
        let d = ds.domain(route.from);
        if let Some(&i) = inputs.iter().chain(poses).find(|&&i| i >= d.len()) {
            return Err(Failure::Usage(anyhow!("image index {i} out of range for the {} {} images", d.len(), route.from)));
        }
        let ims: Vec<&PersonImage> = inputs.iter().map(|&i| d.image(i)).collect();
        let ps: Vec<&PoseMap> = poses.iter().map(|&i| d.pose_map(i)).collect();
        grids.push(render_grid(&model, &ims, &ps, &[route]).map_err(core)?);
    }
    stack(grids).write_png(out).map_err(core)?;
    println!("wrote {}", out.display());
    Ok(())
}

pub fn ablate(args: &ConfigArgs, data: &Path, run_dir: &Path, variants: &[String], force: bool) -> Outcome {
    let loaded = load_config(args)?;
    let cfg = &loaded.config;
    let variants: Vec<Variant> = if variants.is_empty() {
        cfg.ablate.variants.clone()
    } else {
        variants.iter().map(|v| v.parse()).collect::<Result<_, _>>().map_err(core)?
    };
    if variants.is_empty() {
        return Err(Failure::Usage(anyhow!("no ablation variants selected")));
    }
    let ds = load_data(data)?;
    prepare_dir(run_dir, force)?;
    loaded.snapshot(run_dir).runtime()?;
    let rows = run_ablation(&cfg.train, &ds, &variants, &cfg.eval.probes, Some(run_dir));
    let table = ablation_table(&rows);
    print!("{table}");
    write_text(&run_dir.join("ablation.txt"), &table)?;
    let json = serde_json::to_string_pretty(&rows).context("serialising the ablation rows").runtime()?;
    write_text(&run_dir.join("ablation.json"), &(json + "\n"))?;
    let failed: Vec<&str> = rows.iter().filter(|r| r.outcome.is_err()).map(|r| r.variant.slug()).collect();
    if !failed.is_empty() {
        return Err(Failure::Runtime(anyhow!("variants failed: {}", failed.join(", "))));
    }
    Ok(())
}
