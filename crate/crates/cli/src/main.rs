use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{info, warn};
use pose_forge::evalkit::{
    average_precision, average_recall, matched_errors, mspd, mssd, ImageMatches, MetricConfig,
};
use pose_forge::features::{
    build_query_features, template_views, DescriptorProviderSpec, GeoScaleConfig, ProviderKind,
    Providers, QueryFeatureConfig,
};
use pose_forge::pipeline::io::{
    load_camera, load_model, load_prepared, load_scene, read_csv, read_gt, result_rows,
    save_prepared, write_csv, PoseRow,
};
use pose_forge::registration::Scoring;
use pose_forge::{run_scene, EstimateConfig, ModeConfig, ObjectModel, Pose, PreparedObject};
use std::collections::BTreeMap;
use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::time::Instant;

#[derive(Parser)]
#[command(
    name = "pose-forge",
    version,
    about = "Training-free 6D object pose estimation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Compute the query feature cloud of an object model.
    Prepare(PrepareArgs),
    /// Estimate poses of one object in a scene (or every scene under a directory).
    Estimate(EstimateArgs),
    /// Score predicted poses against ground truth.
    Eval(EvalArgs),
}

#[derive(Args)]
struct PrepareArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long, default_value = "synthetic-geometric")]
    provider: ProviderKind,
    /// Extra provider parameter, `key=value`; repeatable.
    #[arg(long = "provider-param", value_parser = parse_key_value)]
    provider_params: Vec<(String, String)>,
    #[arg(long, default_value_t = 5000)]
    points: usize,
    #[arg(long, default_value_t = 162)]
    views: usize,
    #[arg(long = "min-views", default_value_t = 18)]
    min_views: usize,
    /// Object id stored with the features; defaults to the model file stem.
    #[arg(long = "object-id")]
    object_id: Option<String>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Loc,
    Det,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScoringArg {
    Feature,
    Inlier,
}

#[derive(Args)]
struct EstimateArgs {
    #[arg(long)]
    scene: PathBuf,
    #[arg(long)]
    object: String,
    #[arg(long, value_enum, default_value = "loc")]
    mode: ModeArg,
    /// Instances to localize.
    #[arg(long, default_value_t = 1)]
    n: usize,
    /// Masks kept per source; defaults to n+1 (loc) or 100 (det).
    #[arg(long)]
    m: Option<usize>,
    #[arg(long = "tau-mask", default_value_t = 0.4)]
    tau_mask: f64,
    #[arg(long, default_value_t = 10)]
    k: usize,
    #[arg(long, default_value_t = 10_000)]
    iters: usize,
    /// Inlier and ICP threshold as a fraction of the diameter.
    #[arg(long, default_value_t = 0.03)]
    tau: f64,
    #[arg(long, default_value_t = 1.0)]
    alpha: f64,
    #[arg(long, default_value_t = 1.0)]
    beta: f64,
    #[arg(long, default_value_t = 1.0)]
    gamma: f64,
    #[arg(long, value_enum, default_value = "feature")]
    scoring: ScoringArg,
    #[arg(long = "nms-radius", default_value_t = 0.05)]
    nms_radius: f64,
    /// Worker threads; 0 uses all cores.
    #[arg(long, default_value_t = 0)]
    workers: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Model file; defaults to `<scene>/models/<object>.ply`.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Query features; defaults to `<scene>/features/<object>.fcl`.
    #[arg(long)]
    features: Option<PathBuf>,
    /// Write 0 in the time_ms column so repeated runs are byte-identical.
    #[arg(long = "no-timing")]
    no_timing: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum MetricArg {
    Mssd,
    Mspd,
    Ar,
    Ap,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    pred: PathBuf,
    /// Scene directory with `gt.json`, or a directory of such scenes.
    #[arg(long)]
    gt: PathBuf,
    #[arg(long, value_enum)]
    metric: MetricArg,
}

fn parse_key_value(s: &str) -> Result<(String, String), String> {
    s.split_once('=')
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .ok_or_else(|| format!("expected key=value, got '{s}'"))
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Prepare(a) => prepare(a),
        Command::Estimate(a) => estimate(a),
        Command::Eval(a) => eval(a),
    }
}

fn prepare(a: PrepareArgs) -> Result<()> {
    let model: ObjectModel<f64> =
        load_model(&a.model).with_context(|| format!("loading {}", a.model.display()))?;
    let mut spec = DescriptorProviderSpec::new(a.provider);
    for (k, v) in a.provider_params {
        spec = spec.with_param(&k, v);
    }
    let providers = Providers::from_spec(&spec)?;
    let cfg = QueryFeatureConfig {
        n_points: a.points,
        n_views: a.views,
        min_views: a.min_views,
        seed: a.seed,
        ..QueryFeatureConfig::default()
    };
    let start = Instant::now();
    let views = template_views(&model, cfg.n_views, cfg.n_points)?;
    let q = build_query_features(&model, &providers, &views, &cfg)?;
    let object_id = a.object_id.unwrap_or_else(|| file_stem(&a.model));
    info!(
        "{object_id}: {} query points, dim {}, {:.1} s",
        q.cloud.len(),
        q.cloud.dim(),
        start.elapsed().as_secs_f64()
    );
    let obj = PreparedObject::new(
        object_id,
        model,
        q.cloud,
        q.pca,
        spec,
        GeoScaleConfig::default(),
    )?;
    save_prepared(&a.out, &obj)?;
    Ok(())
}

fn file_stem(p: &Path) -> String {
    p.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

/// `dir` itself if it contains `marker`, otherwise its subdirectories that
/// do, sorted by name.
fn scene_dirs(dir: &Path, marker: &str) -> Result<Vec<PathBuf>> {
    if dir.join(marker).exists() {
        return Ok(vec![dir.to_path_buf()]);
    }
    let mut out: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(marker).exists())
        .collect();
    out.sort();
    if out.is_empty() {
        bail!("no scene with {marker} under {}", dir.display());
    }
    Ok(out)
}

fn estimate(a: EstimateArgs) -> Result<()> {
    let mode = match a.mode {
        ModeArg::Loc => ModeConfig {
            m_masks: a.m.unwrap_or(a.n + 1),
            nms_radius: a.nms_radius,
            ..ModeConfig::localization(a.n)
        },
        ModeArg::Det => ModeConfig {
            m_masks: a.m.unwrap_or(100),
            tau_mask: a.tau_mask,
            nms_radius: a.nms_radius,
            ..ModeConfig::detection()
        },
    };
    let mut cfg = EstimateConfig {
        k: a.k,
        workers: a.workers,
        ..EstimateConfig::default()
    };
    cfg.ransac.iterations = a.iters;
    cfg.ransac.tau_inlier = a.tau;
    cfg.ransac.seed = a.seed;
    cfg.ransac.scoring = match a.scoring {
        ScoringArg::Feature => Scoring::FeatureAware,
        ScoringArg::Inlier => Scoring::InlierRatio,
    };
    cfg.icp.tau_icp = a.tau;
    cfg.weights.alpha = a.alpha;
    cfg.weights.beta = a.beta;
    cfg.weights.gamma = a.gamma;

    let model_path = a
        .model
        .unwrap_or_else(|| a.scene.join("models").join(format!("{}.ply", a.object)));
    let fcl = a
        .features
        .unwrap_or_else(|| a.scene.join("features").join(format!("{}.fcl", a.object)));
    let model: ObjectModel<f64> =
        load_model(&model_path).with_context(|| format!("loading {}", model_path.display()))?;
    let mut obj =
        load_prepared(&fcl, model).with_context(|| format!("loading {}", fcl.display()))?;
    if obj.object_id != a.object {
        warn!(
            "features were prepared as '{}', using '{}'",
            obj.object_id, a.object
        );
        obj.object_id = a.object.clone();
    }

    let mut rows: Vec<PoseRow> = Vec::new();
    for dir in scene_dirs(&a.scene, "camera.json")? {
        let scene =
            load_scene::<f64>(&dir).with_context(|| format!("loading scene {}", dir.display()))?;
        let results = run_scene(&scene, std::slice::from_ref(&obj), &mode, &cfg)?;
        for r in &results {
            for s in &r.skipped {
                warn!(
                    "{}: mask {} skipped: {}",
                    scene.scene_id, s.mask_ref, s.reason
                );
            }
            if r.shortfall > 0 {
                warn!(
                    "{}: {} of {} instances not found",
                    scene.scene_id, r.shortfall, mode.n_instances
                );
            }
            let t = &r.timings;
            info!(
                "{}: {} poses from {} masks in {:.0} ms (features {:.0}, matching {:.0}, ransac {:.0}, refinement {:.0})",
                scene.scene_id,
                r.poses.len(),
                r.processed.len(),
                r.total_ms,
                t.features_ms,
                t.matching_ms,
                t.ransac_ms,
                t.refinement_ms
            );
        }
        rows.extend(result_rows(&scene.scene_id, &results, !a.no_timing));
    }
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    write_csv(BufWriter::new(File::create(&a.out)?), &rows)?;
    Ok(())
}

/// Ground truth and predictions of one object in one scene.
struct Group {
    model: ObjectModel<f64>,
    camera_dir: PathBuf,
    gt: Vec<Pose<f64>>,
    pred: Vec<(f64, Pose<f64>)>,
}

fn find_model(scene: &Path, root: &Path, object_id: &str) -> Result<ObjectModel<f64>> {
    for dir in [scene.join("models"), root.join("models")] {
        let p = dir.join(format!("{object_id}.ply"));
        if p.exists() {
            return load_model(&p).with_context(|| format!("loading {}", p.display()));
        }
    }
    bail!(
        "no model for '{object_id}' in {} or {}",
        scene.display(),
        root.display()
    )
}

fn eval(a: EvalArgs) -> Result<()> {
    let rows =
        read_csv(File::open(&a.pred).with_context(|| format!("opening {}", a.pred.display()))?)?;
    let mut groups: BTreeMap<(String, String), Group> = BTreeMap::new();
    let mut models: BTreeMap<String, ObjectModel<f64>> = BTreeMap::new();
    for dir in scene_dirs(&a.gt, "gt.json")? {
        let scene_id = file_stem(&dir.canonicalize()?);
        for rec in read_gt(&dir)? {
            if !models.contains_key(&rec.object_id) {
                models.insert(
                    rec.object_id.clone(),
                    find_model(&dir, &a.gt, &rec.object_id)?,
                );
            }
            let key = (scene_id.clone(), rec.object_id.clone());
            groups
                .entry(key)
                .or_insert_with(|| Group {
                    model: models[&rec.object_id].clone(),
                    camera_dir: dir.clone(),
                    gt: Vec::new(),
                    pred: Vec::new(),
                })
                .gt
                .push(rec.pose()?);
        }
    }
    let mut unmatched = 0;
    for r in &rows {
        match groups.get_mut(&(r.scene_id.clone(), r.object_id.clone())) {
            Some(g) => g.pred.push((r.score_final, r.pose()?)),
            None => unmatched += 1,
        }
    }
    if unmatched > 0 {
        warn!("{unmatched} predictions have no ground truth for their scene and object");
    }

    let images = |use_mspd: bool| -> Result<Vec<ImageMatches>> {
        groups
            .values()
            .map(|g| {
                let k = if use_mspd {
                    Some(load_camera::<f64>(&g.camera_dir)?)
                } else {
                    None
                };
                let d = g.model.diameter();
                let errors = g
                    .pred
                    .iter()
                    .map(|(_, p)| {
                        g.gt.iter()
                            .map(|gt| match &k {
                                Some(k) => mspd(p, gt, &g.model, k).map_err(anyhow::Error::from),
                                None => Ok(mssd(p, gt, &g.model) / d),
                            })
                            .collect::<Result<Vec<f64>>>()
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(ImageMatches {
                    scores: g.pred.iter().map(|p| p.0).collect(),
                    errors,
                    n_gt: g.gt.len(),
                })
            })
            .collect()
    };
    let recall = |use_mspd: bool, cfg: &MetricConfig| -> Result<(f64, Vec<f64>)> {
        let errs: Vec<f64> = images(use_mspd)?.iter().flat_map(matched_errors).collect();
        Ok((average_recall(&errs, cfg)?, errs))
    };
    let n_gt: usize = groups.values().map(|g| g.gt.len()).sum();
    println!("predictions: {}", rows.len());
    println!("ground_truth: {n_gt}");
    match a.metric {
        MetricArg::Mssd => report(
            "mssd",
            "diameter",
            recall(false, &MetricConfig::mssd_default())?,
        ),
        MetricArg::Mspd => report("mspd", "px", recall(true, &MetricConfig::mspd_default())?),
        MetricArg::Ar => {
            let (ar_s, _) = recall(false, &MetricConfig::mssd_default())?;
            let (ar_p, _) = recall(true, &MetricConfig::mspd_default())?;
            println!("ar_mssd: {ar_s:.4}");
            println!("ar_mspd: {ar_p:.4}");
            println!("ar: {:.4}", (ar_s + ar_p) / 2.0);
        }
        MetricArg::Ap => {
            let ap = average_precision(&images(false)?, &MetricConfig::mssd_default())?;
            println!("ap_mssd: {ap:.4}");
        }
    }
    Ok(())
}

fn report(name: &str, unit: &str, (ar, errs): (f64, Vec<f64>)) {
    let found: Vec<f64> = errs.iter().copied().filter(|e| e.is_finite()).collect();
    let mean = if found.is_empty() {
        f64::NAN
    } else {
        found.iter().sum::<f64>() / found.len() as f64
    };
    println!("matched: {}", found.len());
    println!("{name}_mean: {mean:.6} ({unit})");
    println!("ar_{name}: {ar:.4}");
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn key_value_parsing() {
        assert_eq!(
            parse_key_value("visual_dim=32").unwrap(),
            ("visual_dim".into(), "32".into())
        );
        assert!(parse_key_value("visual_dim").is_err());
    }

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
