//! One function per subcommand. Each validates its paths, resolves the
//! configuration and returns the JSON summary line.

use rbf_core::boxfield::{read_field, write_field, AreaMask};
use rbf_core::evalkit::{ablation_run, evaluate, write_ablation_csv, AblationVariant, FusionThresholds};
use rbf_core::geometry::giou;
use rbf_core::mdp::{rollout, rollout_fields, FieldSource, Horizon, RolloutConfig};
use rbf_core::model::{AttentionConfig, PredictorConfig};
use rbf_core::scenes::{GroundTruthFields, NoiseSpec, PlacementMode, Scene, SceneDataset, SceneSpec, Split, SplitFractions};
use rbf_core::training::{train_il, train_rl, TrainConfig, TrainLog};
use rbf_core::PredictorParams;
use serde::Serialize;
use serde_json::{json, Value};
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::config::{fingerprint, hex, load_noise, FileConfig};
use crate::{Cli, CliError, Command, FusionFlags, ModeArg, RolloutFlags, SourceFlags, SplitArg, Switch};

pub fn run(cli: &Cli) -> Result<Value, CliError> {
    let file = FileConfig::load(cli.config.as_deref())?;
    match &cli.command {
        Command::GenData {
            out,
            seed,
            count,
            mode,
            far_probability,
        } => gen_data(&file, out, *seed, *count, *mode, *far_probability),
        Command::TrainIl {
            data,
            out,
            seed,
            attention,
            steps,
            init,
            log,
        } => cmd_train_il(&file, data, out, *seed, *attention, *steps, init.as_deref(), log.as_deref()),
        Command::TrainRl {
            data,
            weights,
            out,
            seed,
            steps,
            horizon,
            terminate_threshold,
            log,
        } => cmd_train_rl(&file, data, weights, out, *seed, *steps, *horizon, *terminate_threshold, log.as_deref()),
        Command::Rollout {
            data,
            scene,
            hand,
            source,
            rollout,
            dump_fields,
        } => cmd_rollout(&file, data, *scene, *hand, source, rollout, dump_fields.as_deref()),
        Command::Eval {
            data,
            split,
            source,
            rollout,
            fusion,
            report,
        } => cmd_eval(&file, data, *split, source, rollout, fusion, report.as_deref()),
        Command::Ablate {
            data,
            split,
            il_weights,
            rl_weights,
            ground_truth,
            noise_spec,
            seed,
            aggregations,
            horizons,
            terminate_threshold,
            fusion,
            name,
            out,
        } => {
            let source = SourceFlags {
                weights: None,
                ground_truth: *ground_truth,
                noise_spec: noise_spec.clone(),
                seed: *seed,
            };
            let axes = AblationAxes {
                aggregations,
                horizons,
                terminate_threshold: *terminate_threshold,
            };
            cmd_ablate(&file, data, *split, il_weights, rl_weights, &source, &axes, fusion, name, out)
        }
        Command::Viz {
            data,
            scene,
            hand,
            source,
            rollout,
            field,
            samples,
            out,
        } => cmd_viz(&file, data, *scene, *hand, source, rollout, field.as_deref(), *samples, out),
    }
}

// ---------------------------------------------------------------- paths

fn require_file(path: &Path) -> Result<(), CliError> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::Io(format!("{}: no such file", path.display())))
    }
}

fn require_dir(path: &Path) -> Result<(), CliError> {
    if path.is_dir() {
        Ok(())
    } else {
        Err(CliError::Io(format!("{}: no such directory", path.display())))
    }
}

/// Output files must land in an existing directory.
fn require_output(path: &Path) -> Result<(), CliError> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() && !p.is_dir() => {
            Err(CliError::Io(format!("{}: parent directory does not exist", path.display())))
        }
        _ if path.is_dir() => Err(CliError::Io(format!("{}: is a directory", path.display()))),
        _ => Ok(()),
    }
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> CliError + '_ {
    move |e| CliError::Io(format!("{}: {e}", path.display()))
}

fn sha256_file(path: &Path) -> Result<String, CliError> {
    use sha2::{Digest, Sha256};
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    Ok(hex(&Sha256::digest(bytes)))
}

fn load_weights(path: &Path) -> Result<PredictorParams, CliError> {
    require_file(path)?;
    let f = File::open(path).map_err(io_err(path))?;
    Ok(PredictorParams::load(BufReader::new(f))?)
}

fn save_weights(p: &PredictorParams, path: &Path) -> Result<(), CliError> {
    let mut w = create(path)?;
    p.save(&mut w)?;
    w.flush().map_err(io_err(path))
}

fn write_log(log: &TrainLog, path: Option<&Path>) -> Result<(), CliError> {
    if let Some(path) = path {
        let mut w = create(path)?;
        log.write_csv(&mut w).map_err(io_err(path))?;
        w.flush().map_err(io_err(path))?;
    }
    Ok(())
}

fn load_dataset(dir: &Path) -> Result<SceneDataset, CliError> {
    require_dir(dir)?;
    Ok(SceneDataset::load(dir)?)
}

fn select(ds: &SceneDataset, split: SplitArg) -> Vec<&Scene> {
    match split {
        SplitArg::Train => ds.split(Split::Train),
        SplitArg::Val => ds.split(Split::Val),
        SplitArg::Test => ds.split(Split::Test),
        SplitArg::All => ds.scenes.iter().collect(),
    }
}

fn scene_at(ds: &SceneDataset, id: usize) -> Result<&Scene, CliError> {
    ds.scenes
        .iter()
        .find(|s| s.id == id)
        .ok_or_else(|| CliError::Usage(format!("scene {id} not in dataset ({} scenes)", ds.scenes.len())))
}

fn require_seed(flag: Option<u64>, file: &FileConfig, what: &str) -> Result<u64, CliError> {
    flag.or(file.seed)
        .ok_or_else(|| CliError::Usage(format!("{what} is stochastic: pass --seed or set `seed` in the config")))
}

// ---------------------------------------------------------------- resolution

fn resolve_rollout(file: &FileConfig, flags: &RolloutFlags) -> Result<RolloutConfig, CliError> {
    let mut cfg = file.rollout;
    if let Some(h) = flags.horizon {
        cfg.horizon = h;
    }
    if let Some(t) = flags.terminate_threshold {
        cfg.terminate_threshold = t;
    }
    if let Some(a) = flags.aggregation {
        cfg.aggregation = a;
    }
    check_threshold(cfg.terminate_threshold)?;
    Ok(cfg)
}

fn check_threshold(t: f64) -> Result<(), CliError> {
    if t.is_finite() && t > 0.0 {
        Ok(())
    } else {
        Err(CliError::Usage(format!("terminate threshold must be positive, got {t}")))
    }
}

fn resolve_fusion(file: &FileConfig, flags: &FusionFlags) -> Result<FusionThresholds, CliError> {
    let mut t = file.fusion;
    if let Some(x) = flags.t_contact {
        t.t_contact = x;
    }
    if let Some(x) = flags.t_obj {
        t.t_obj = x;
    }
    for (name, x) in [("t-contact", t.t_contact), ("t-obj", t.t_obj)] {
        if !(0.0..=1.0).contains(&x) {
            return Err(CliError::Usage(format!("--{name} must lie in [0, 1], got {x}")));
        }
    }
    Ok(t)
}

/// A resolved field source.
enum Source {
    Predictor(PredictorParams),
    Truth(GroundTruthFields),
}

impl Source {
    fn as_dyn(&self) -> &dyn FieldSource {
        match self {
            Source::Predictor(p) => p,
            Source::Truth(g) => g,
        }
    }
}

#[derive(Serialize)]
struct SourceSummary {
    weights: Option<PathBuf>,
    weights_sha256: Option<String>,
    ground_truth: bool,
    noise: Option<NoiseSpec>,
    noise_seed: Option<u64>,
}

fn resolve_truth(flags: &SourceFlags, file: &FileConfig) -> Result<(GroundTruthFields, SourceSummary), CliError> {
    let noise = match &flags.noise_spec {
        Some(path) => Some(load_noise(path)?),
        None => file.noise,
    }
    .filter(|n| !n.is_identity());
    let seed = match noise {
        Some(_) => Some(require_seed(flags.seed, file, "field corruption")?),
        None => None,
    };
    Ok((
        GroundTruthFields {
            noise,
            seed: seed.unwrap_or(0),
        },
        SourceSummary {
            weights: None,
            weights_sha256: None,
            ground_truth: true,
            noise,
            noise_seed: seed,
        },
    ))
}

fn resolve_source(flags: &SourceFlags, file: &FileConfig, spec: &SceneSpec) -> Result<(Source, SourceSummary), CliError> {
    if let Some(path) = &flags.weights {
        let p = load_weights(path)?;
        check_compatible(&p, spec)?;
        return Ok((
            Source::Predictor(p),
            SourceSummary {
                weights: Some(path.clone()),
                weights_sha256: Some(sha256_file(path)?),
                ground_truth: false,
                noise: None,
                noise_seed: None,
            },
        ));
    }
    if flags.ground_truth {
        let (g, s) = resolve_truth(flags, file)?;
        return Ok((Source::Truth(g), s));
    }
    Err(CliError::Usage("pass --weights <file> or --ground-truth".into()))
}

fn check_compatible(p: &PredictorParams, spec: &SceneSpec) -> Result<(), CliError> {
    let expected = spec.feature_channels();
    let found = p.config().feature_channels;
    if found != expected {
        return Err(CliError::Usage(format!(
            "weights expect {found} feature channels but the dataset has {expected}"
        )));
    }
    Ok(())
}

fn summary<T: Serialize>(command: &str, resolved: &T, mut body: Value) -> Value {
    let obj = body.as_object_mut().expect("summary body is an object");
    obj.insert("command".into(), json!(command));
    obj.insert("config_sha256".into(), json!(fingerprint(resolved)));
    body
}

// ---------------------------------------------------------------- commands

fn gen_data(file: &FileConfig, out: &Path, seed: Option<u64>, count: usize, mode: Option<ModeArg>, far_probability: f64) -> Result<Value, CliError> {
    let seed = require_seed(seed, file, "gen-data")?;
    let mut spec = file.scene.clone();
    if let Some(m) = mode {
        spec.mode = match m {
            ModeArg::Near => PlacementMode::Near,
            ModeArg::Far => PlacementMode::Far,
            ModeArg::Mixed => PlacementMode::Mixed { far_probability },
        };
    }
    if out.exists() && !out.is_dir() {
        return Err(CliError::Io(format!("{}: exists and is not a directory", out.display())));
    }
    let ds = SceneDataset::generate(seed, &spec, count, SplitFractions::default())?;
    std::fs::create_dir_all(out).map_err(io_err(out))?;
    ds.save(out)?;
    log::info!("wrote {} scenes to {}", ds.scenes.len(), out.display());
    let resolved = json!({ "seed": seed, "count": count, "spec": spec });
    Ok(summary(
        "gen-data",
        &resolved,
        json!({
            "out": out,
            "scenes": ds.scenes.len(),
            "train": ds.split(Split::Train).len(),
            "val": ds.split(Split::Val).len(),
            "test": ds.split(Split::Test).len(),
            "dataset_sha256": sha256_file(&out.join("scenes.jsonl"))?,
        }),
    ))
}

fn last_row(log: &TrainLog) -> Value {
    log.rows.last().map_or(Value::Null, |r| json!(r))
}

#[allow(clippy::too_many_arguments)]
fn cmd_train_il(
    file: &FileConfig,
    data: &Path,
    out: &Path,
    seed: Option<u64>,
    attention: Option<Switch>,
    steps: Option<usize>,
    init: Option<&Path>,
    log_path: Option<&Path>,
) -> Result<Value, CliError> {
    let seed = require_seed(seed, file, "train-il")?;
    require_output(out)?;
    if let Some(p) = log_path {
        require_output(p)?;
    }
    let ds = load_dataset(data)?;
    let mut config: TrainConfig = file.train.clone();
    config.seed = seed;
    if let Some(s) = steps {
        config.il.steps = s;
    }
    let params = match init {
        Some(path) => {
            let p = load_weights(path)?;
            check_compatible(&p, &ds.spec)?;
            p
        }
        None => {
            let attention = attention.map(|a| a == Switch::On).or(file.attention).unwrap_or(false);
            let pc = PredictorConfig {
                attention: attention.then(AttentionConfig::default),
                ..ds.spec.predictor_config()
            };
            PredictorParams::init(pc, seed)?
        }
    };
    let predictor = params.config().clone();
    let train = ds.split(Split::Train);
    log::info!("imitation training on {} scenes for {} steps", train.len(), config.il.steps);
    let (trained, log) = train_il(&config, &train, params)?;
    save_weights(&trained, out)?;
    write_log(&log, log_path)?;
    let resolved = json!({ "train": config, "predictor": predictor, "init": init, "data": data });
    Ok(summary(
        "train-il",
        &resolved,
        json!({
            "out": out,
            "steps": log.rows.len(),
            "skipped": log.skipped,
            "last": last_row(&log),
            "weights_sha256": sha256_file(out)?,
        }),
    ))
}

#[allow(clippy::too_many_arguments)]
fn cmd_train_rl(
    file: &FileConfig,
    data: &Path,
    weights: &Path,
    out: &Path,
    seed: Option<u64>,
    steps: Option<usize>,
    horizon: Option<Horizon>,
    terminate_threshold: Option<f64>,
    log_path: Option<&Path>,
) -> Result<Value, CliError> {
    let seed = require_seed(seed, file, "train-rl")?;
    require_output(out)?;
    if let Some(p) = log_path {
        require_output(p)?;
    }
    let params = load_weights(weights)?;
    let ds = load_dataset(data)?;
    check_compatible(&params, &ds.spec)?;
    let mut config: TrainConfig = file.train.clone();
    config.seed = seed;
    if let Some(s) = steps {
        config.rl.steps = s;
    }
    match horizon {
        Some(Horizon::Finite(n)) => config.rl.horizon = n,
        Some(Horizon::Unbounded) => {
            return Err(CliError::Usage("fine-tuning needs a finite --horizon".into()));
        }
        None => {}
    }
    if let Some(t) = terminate_threshold {
        check_threshold(t)?;
        config.rl.terminate_threshold = t;
    }
    let train = ds.split(Split::Train);
    log::info!("fine-tuning on {} scenes for {} steps", train.len(), config.rl.steps);
    let (trained, log) = train_rl(&config, &train, params)?;
    save_weights(&trained, out)?;
    write_log(&log, log_path)?;
    let resolved = json!({ "train": config, "weights": sha256_file(weights)?, "data": data });
    Ok(summary(
        "train-rl",
        &resolved,
        json!({
            "out": out,
            "steps": log.rows.len(),
            "skipped": log.skipped,
            "last": last_row(&log),
            "weights_sha256": sha256_file(out)?,
        }),
    ))
}

#[allow(clippy::too_many_arguments)]
fn cmd_rollout(
    file: &FileConfig,
    data: &Path,
    scene_id: usize,
    hand: usize,
    source: &SourceFlags,
    flags: &RolloutFlags,
    dump: Option<&Path>,
) -> Result<Value, CliError> {
    if let Some(d) = dump {
        require_dir(d)?;
    }
    let cfg = resolve_rollout(file, flags)?;
    let ds = load_dataset(data)?;
    let (src, src_summary) = resolve_source(source, file, &ds.spec)?;
    let scene = scene_at(&ds, scene_id)?;
    let hand_box = scene
        .hands
        .get(hand)
        .ok_or_else(|| CliError::Usage(format!("scene {scene_id} has {} hands", scene.hands.len())))?;
    let gt = scene.linked_object(hand);
    let episode = rollout(scene, hand_box, src.as_dyn(), &cfg, gt)?;
    if let Some(dir) = dump {
        let fields = src.as_dyn().fields(scene)?;
        for (name, f) in [("ho.rbff", &fields.ho), ("oo.rbff", &fields.oo)] {
            let path = dir.join(name);
            let mut w = create(&path)?;
            write_field(f, &mut w).map_err(io_err(&path))?;
            w.flush().map_err(io_err(&path))?;
        }
    }
    let final_giou = match (episode.final_estimate, gt) {
        (Some(e), Some(g)) => Some(giou(&e, g)),
        _ => None,
    };
    let resolved = json!({ "rollout": cfg, "source": src_summary, "scene": scene_id, "hand": hand, "data": data });
    Ok(summary(
        "rollout",
        &resolved,
        json!({
            "scene": scene_id,
            "hand": hand,
            "ground_truth": gt,
            "length": episode.len(),
            "final_estimate": episode.final_estimate,
            "final_giou": final_giou,
            "terminated": episode.terminated,
            "truncated": episode.truncated,
            "failure": episode.failure.as_ref().map(|e| e.to_string()),
            "trajectory": episode.steps,
        }),
    ))
}

fn cmd_eval(
    file: &FileConfig,
    data: &Path,
    split: SplitArg,
    source: &SourceFlags,
    flags: &RolloutFlags,
    fusion: &FusionFlags,
    report: Option<&Path>,
) -> Result<Value, CliError> {
    if let Some(r) = report {
        require_output(r)?;
    }
    let cfg = resolve_rollout(file, flags)?;
    let thresholds = resolve_fusion(file, fusion)?;
    let ds = load_dataset(data)?;
    let (src, src_summary) = resolve_source(source, file, &ds.spec)?;
    let scenes = select(&ds, split);
    if scenes.is_empty() {
        return Err(CliError::Usage("selected split is empty".into()));
    }
    let r = evaluate(&scenes, src.as_dyn(), &cfg, &thresholds)?;
    if let Some(path) = report {
        let mut w = create(path)?;
        serde_json::to_writer_pretty(&mut w, &r).map_err(|e| CliError::Io(e.to_string()))?;
        w.flush().map_err(io_err(path))?;
    }
    let resolved = json!({ "rollout": cfg, "fusion": thresholds, "source": src_summary, "split": format!("{split:?}"), "data": data });
    Ok(summary(
        "eval",
        &resolved,
        json!({
            "scenes": scenes.len(),
            "episodes": r.episodes,
            "ap25": r.ap25,
            "ap50": r.ap50,
            "ap75": r.ap75,
            "mean_giou": r.mean_giou,
            "mean_length": r.mean_length,
            "failures": r.failures,
            "truncated": r.truncated,
        }),
    ))
}

struct AblationAxes<'a> {
    aggregations: &'a [rbf_core::Aggregation],
    horizons: &'a [Horizon],
    terminate_threshold: Option<f64>,
}

#[allow(clippy::too_many_arguments)]
fn cmd_ablate(
    file: &FileConfig,
    data: &Path,
    split: SplitArg,
    il_weights: &[PathBuf],
    rl_weights: &[PathBuf],
    source: &SourceFlags,
    axes: &AblationAxes<'_>,
    fusion: &FusionFlags,
    name: &str,
    out: &Path,
) -> Result<Value, CliError> {
    require_output(out)?;
    if il_weights.is_empty() && rl_weights.is_empty() && !source.ground_truth {
        return Err(CliError::Usage("nothing to ablate: pass --il-weights, --rl-weights or --ground-truth".into()));
    }
    let threshold = axes.terminate_threshold.unwrap_or(file.rollout.terminate_threshold);
    check_threshold(threshold)?;
    let thresholds = resolve_fusion(file, fusion)?;
    let ds = load_dataset(data)?;
    let mut predictors = Vec::new();
    let mut hashes = Vec::new();
    for (path, rl) in il_weights.iter().map(|p| (p, false)).chain(rl_weights.iter().map(|p| (p, true))) {
        let p = load_weights(path)?;
        check_compatible(&p, &ds.spec)?;
        hashes.push(sha256_file(path)?);
        predictors.push((p, rl));
    }
    let truth = if source.ground_truth {
        Some(resolve_truth(source, file)?)
    } else {
        None
    };
    let mut variants: Vec<AblationVariant<'_>> = predictors
        .iter()
        .map(|(p, rl)| AblationVariant {
            attention: p.config().attention.is_some(),
            rl: *rl,
            source: p,
        })
        .collect();
    if let Some((g, _)) = &truth {
        variants.push(AblationVariant {
            attention: false,
            rl: false,
            source: g,
        });
    }
    let scenes = select(&ds, split);
    if scenes.is_empty() {
        return Err(CliError::Usage("selected split is empty".into()));
    }
    let rows = ablation_run(name, &scenes, &variants, axes.aggregations, axes.horizons, threshold, &thresholds)?;
    let mut w = create(out)?;
    write_ablation_csv(&rows, &mut w).map_err(io_err(out))?;
    w.flush().map_err(io_err(out))?;
    let resolved = json!({
        "weights": hashes,
        "truth": truth.as_ref().map(|t| &t.1),
        "aggregations": axes.aggregations,
        "horizons": axes.horizons,
        "terminate_threshold": threshold,
        "fusion": thresholds,
        "split": format!("{split:?}"),
        "data": data,
    });
    Ok(summary("ablate", &resolved, json!({ "out": out, "rows": rows.len(), "csv_sha256": sha256_file(out)? })))
}

#[allow(clippy::too_many_arguments)]
fn cmd_viz(
    file: &FileConfig,
    data: &Path,
    scene_id: usize,
    hand: usize,
    source: &SourceFlags,
    flags: &RolloutFlags,
    field: Option<&Path>,
    samples: usize,
    out: &Path,
) -> Result<Value, CliError> {
    require_output(out)?;
    if let Some(f) = field {
        require_file(f)?;
    }
    let cfg = resolve_rollout(file, flags)?;
    let ds = load_dataset(data)?;
    let scene = scene_at(&ds, scene_id)?;
    let hand_box = *scene
        .hands
        .get(hand)
        .ok_or_else(|| CliError::Usage(format!("scene {scene_id} has {} hands", scene.hands.len())))?;
    let (src, src_summary) = resolve_source(source, file, &ds.spec)?;
    let mut fields = src.as_dyn().fields(scene)?;
    if let Some(path) = field {
        let f = read_field(BufReader::new(File::open(path).map_err(io_err(path))?))?;
        if f.grid() != fields.ho.grid() {
            return Err(CliError::Usage(format!(
                "field grid {:?} does not match scene grid {:?}",
                f.grid(),
                fields.ho.grid()
            )));
        }
        fields.ho = f;
    }
    let gt = scene.linked_object(hand);
    let episode = rollout_fields(&fields, &hand_box, &cfg, gt);
    let (h, w) = fields.ho.grid();
    let voted = cfg.aggregation.aggregate(&fields.ho, &AreaMask::from_box(&hand_box, h, w)).ok();
    let doc = crate::svg::render(&crate::svg::VizInput {
        scene,
        hand: hand_box,
        object: gt.copied(),
        field: &fields.ho,
        voted,
        estimates: episode_estimates(&episode),
        samples,
    });
    std::fs::write(out, doc).map_err(io_err(out))?;
    let resolved = json!({ "rollout": cfg, "source": src_summary, "field": field, "scene": scene_id, "hand": hand, "samples": samples, "data": data });
    Ok(summary(
        "viz",
        &resolved,
        json!({ "out": out, "voted": voted, "final_estimate": episode.final_estimate, "svg_sha256": sha256_file(out)? }),
    ))
}

/// Estimates after each applied step.
fn episode_estimates(ep: &rbf_core::mdp::Episode) -> Vec<rbf_core::BBox> {
    let mut out = Vec::new();
    for s in ep.steps.iter().filter(|s| !s.terminal) {
        out.push(rbf_core::mdp::step(&s.state, &s.action).estimate);
    }
    out
}
