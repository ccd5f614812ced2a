use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use quadmimic_core::gaitmetrics::{
    clip_to_dump, evaluate_return, gait_metrics_from_dump, record_episode, MetricsError,
};
use quadmimic_core::mocap::{dataset_manifest, load_clip, synthesize_gait, GaitSpec, MocapError, MotionClip};
use quadmimic_core::policy::{Checkpoint, CheckpointError, Stage, CHECKPOINT_VERSION};
use quadmimic_core::retarget::{retarget_clip, KeypointClip, RetargetAdjust, RobotMorphology};
use quadmimic_core::simenv::{read_dump, write_dump, SimError};
use quadmimic_core::terrain::TerrainKind;
use quadmimic_core::trainer::{
    curve_csv, derive_seed, train_adaptation, train_imitation, CommandTask, CurveRow, TrainError,
};
use serde::Serialize;

use crate::config::{RunConfig, DEFAULT_OUT};
use crate::{Cli, CliError, Command, EvalArgs, ImitateArgs, TrainCommand};

struct Ctx {
    cfg: RunConfig,
    seed: u64,
    workers: usize,
    out: PathBuf,
    morph: RobotMorphology,
}

#[derive(Serialize)]
struct Provenance<'a> {
    command: &'a str,
    seed: u64,
    workers: usize,
    config_sha256: String,
    config: &'a RunConfig,
    versions: Versions,
    outputs: Vec<String>,
}

#[derive(Serialize)]
struct Versions {
    quadmimic: &'static str,
    checkpoint_format: u32,
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let seed = cfg.resolve_seed(cli.seed)?;
    cfg.seed = Some(seed);
    let workers = cli.workers.or(cfg.workers).unwrap_or(0);
    if workers > 0 {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(workers).build_global();
    }
    let out = cli.out.clone().or_else(|| cfg.paths.out.clone()).unwrap_or_else(|| PathBuf::from(DEFAULT_OUT));
    fs::create_dir_all(&out).map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", out.display())))?;
    let ctx = Ctx { cfg, seed, workers, out, morph: RobotMorphology::default() };

    let (name, outputs) = match cli.command {
        Command::Synth(a) => ("synth", synth(&ctx, a)?),
        Command::Retarget(a) => ("retarget", retarget(&ctx, a)?),
        Command::Train(TrainCommand::Imitate(a)) => ("train imitate", imitate(&ctx, a)?),
        Command::Train(TrainCommand::Adapt(a)) => ("train adapt", adapt(&ctx, a)?),
        Command::Eval(a) => ("eval", eval(&ctx, a)?),
        Command::Gait(a) => ("gait", gait(&ctx, &a.dump)?),
        Command::Manifest(a) => ("manifest", manifest(&ctx, a.dataset)?),
    };
    let record = Provenance {
        command: name,
        seed: ctx.seed,
        workers: ctx.workers,
        config_sha256: ctx.cfg.hash(),
        config: &ctx.cfg,
        versions: Versions { quadmimic: env!("CARGO_PKG_VERSION"), checkpoint_format: CHECKPOINT_VERSION },
        outputs: outputs.iter().filter_map(|p| p.file_name().map(|n| n.to_string_lossy().into_owned())).collect(),
    };
    let json = serde_json::to_string_pretty(&record).expect("provenance serializes");
    write(&ctx.out.join("run.json"), json.as_bytes())
}

fn write(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    fs::write(path, bytes).map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))
}

fn usage(e: impl std::fmt::Display) -> CliError {
    CliError::Usage(e.to_string())
}

fn train_error(ctx: &Ctx, e: TrainError) -> CliError {
    match e {
        TrainError::NonFinite { update, what, diagnostics } => {
            let dump = ctx.out.join("nonfinite.txt");
            let text = format!("update {update}\nnon-finite {what}\n{diagnostics}\n");
            if let Err(w) = fs::write(&dump, text) {
                return CliError::Runtime(format!("non-finite {what} at update {update}; dump failed: {w}"));
            }
            CliError::Numeric { message: format!("non-finite {what} at update {update}"), dump }
        }
        e @ TrainError::Sim(SimError::NonFiniteAction(_)) => {
            let dump = ctx.out.join("nonfinite.txt");
            let _ = fs::write(&dump, format!("{e}\n"));
            CliError::Numeric { message: e.to_string(), dump }
        }
        e @ (TrainError::Config(_)
        | TrainError::Checkpoint(_)
        | TrainError::HashMismatch { .. }
        | TrainError::Mocap(_)
        | TrainError::Terrain(_)) => usage(e),
        e => CliError::Runtime(e.to_string()),
    }
}

fn metrics_error(ctx: &Ctx, e: MetricsError) -> CliError {
    match e {
        MetricsError::Train(t) => train_error(ctx, t),
        e @ MetricsError::Policy(_) => CliError::Runtime(e.to_string()),
        e => usage(e),
    }
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint, CliError> {
    Checkpoint::load(path).map_err(|e| match e {
        CheckpointError::Io(io) => usage(format!("cannot read checkpoint {}: {io}", path.display())),
        e => usage(format!("{}: {e}", path.display())),
    })
}

fn read_clip(path: &Path) -> Result<MotionClip, CliError> {
    load_clip(path).map_err(|e| match e {
        MocapError::Io(io) => usage(format!("cannot read clip {}: {io}", path.display())),
        e => usage(format!("{}: {e}", path.display())),
    })
}

fn synth(ctx: &Ctx, a: crate::SynthArgs) -> Result<Vec<PathBuf>, CliError> {
    let spec = GaitSpec {
        gait_tag: a.gait.parse().map_err(usage)?,
        terrain_tag: a.terrain.parse().map_err(usage)?,
        speed: a.speed,
        duration: a.seconds,
        cycle_time: a.cycle_time,
        duty_factor: a.duty_factor,
        fps: a.fps,
        ..GaitSpec::default()
    };
    spec.validate().map_err(usage)?;
    let mut clip = synthesize_gait(&spec, &ctx.morph).map_err(usage)?;
    let name = a.name.unwrap_or_else(|| format!("{}_{}", spec.gait_tag, spec.terrain_tag));
    clip.name = name.clone();
    let clip_path = ctx.out.join(format!("{name}.clip"));
    write(&clip_path, clip.to_text().as_bytes())?;
    let dump_path = ctx.out.join(format!("{name}.traj"));
    let mut bytes = Vec::new();
    write_dump(&mut bytes, &clip_to_dump(&clip, &spec.terrain())).map_err(|e| CliError::Runtime(e.to_string()))?;
    write(&dump_path, &bytes)?;
    let manifest_path = ctx.out.join("manifest.csv");
    let m = dataset_manifest(&ctx.out).map_err(|e| CliError::Runtime(e.to_string()))?;
    write(&manifest_path, m.to_csv().as_bytes())?;
    println!("{}", clip_path.display());
    Ok(vec![clip_path, dump_path, manifest_path])
}

fn retarget(ctx: &Ctx, a: crate::RetargetArgs) -> Result<Vec<PathBuf>, CliError> {
    let kp = KeypointClip::load(&a.input).map_err(|e| usage(format!("{}: {e}", a.input.display())))?;
    let adjust = RetargetAdjust { base_height_drop: a.base_height_drop, leg_widen: a.leg_widen };
    let clip = retarget_clip(&kp, &ctx.morph, &adjust).map_err(usage)?;
    let name = a.name.unwrap_or_else(|| kp.name.clone());
    let path = ctx.out.join(format!("{name}.clip"));
    write(&path, clip.to_text().as_bytes())?;
    println!("{}", path.display());
    Ok(vec![path])
}

fn dataset_clips(dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| usage(format!("cannot read dataset {}: {e}", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "clip"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(usage(format!("no .clip files in {}", dir.display())));
    }
    Ok(paths)
}

fn progress(row: &CurveRow) {
    if row.update % 10 == 0 {
        eprintln!("update {:>5}  reward {:.4}  raw {:.4}", row.update, row.mean_reward, row.mean_raw_reward);
    }
}

fn imitate(ctx: &Ctx, a: ImitateArgs) -> Result<Vec<PathBuf>, CliError> {
    let paths = if !a.clips.is_empty() {
        a.clips.clone()
    } else if let Some(dir) = &ctx.cfg.paths.dataset {
        dataset_clips(dir)?
    } else {
        Vec::new()
    };
    let clips = if paths.is_empty() {
        vec![synthesize_gait(&GaitSpec::default(), &ctx.morph).map_err(usage)?]
    } else {
        paths.iter().map(|p| read_clip(p)).collect::<Result<Vec<_>, _>>()?
    };
    let mut tc = ctx.cfg.train_config(ctx.seed, ctx.workers);
    if let Some(n) = a.updates {
        tc.ppo.max_updates = n;
    }
    let run = train_imitation(&tc, clips, &ctx.morph, &mut progress).map_err(|e| train_error(ctx, e))?;
    finish_training(ctx, "imitate", &run.checkpoint, &run.curve)
}

fn adapt(ctx: &Ctx, a: crate::AdaptArgs) -> Result<Vec<PathBuf>, CliError> {
    let from = a
        .from
        .or_else(|| ctx.cfg.paths.checkpoint.clone())
        .ok_or_else(|| usage("train adapt needs --from <stage-one checkpoint>"))?;
    let stage1 = load_checkpoint(&from)?;
    let resume = a.resume.as_deref().map(load_checkpoint).transpose()?;
    let mut tc = ctx.cfg.train_config(ctx.seed, ctx.workers);
    if let Some(n) = a.updates {
        tc.ppo.max_updates = n;
    }
    let run = train_adaptation(&tc, &stage1, resume.as_ref(), &ctx.morph, &mut progress)
        .map_err(|e| train_error(ctx, e))?;
    finish_training(ctx, "adapt", &run.checkpoint, &run.curve)
}

fn finish_training(ctx: &Ctx, stage: &str, ck: &Checkpoint, curve: &[CurveRow]) -> Result<Vec<PathBuf>, CliError> {
    let ck_path = ctx.out.join(format!("{stage}.ckpt"));
    write(&ck_path, ck.to_json().as_bytes())?;
    let curve_path = ctx.out.join(format!("{stage}_curve.csv"));
    write(&curve_path, curve_csv(curve).as_bytes())?;
    println!("{}", ck_path.display());
    Ok(vec![ck_path, curve_path])
}

fn eval(ctx: &Ctx, a: EvalArgs) -> Result<Vec<PathBuf>, CliError> {
    let ck = load_checkpoint(&a.ckpt)?;
    if ck.stage != Stage::Adaptation {
        return Err(usage(format!("{} is a stage-one checkpoint; eval needs stage two", a.ckpt.display())));
    }
    let kinds = a.terrains.iter().map(|s| s.parse::<TerrainKind>()).collect::<Result<Vec<_>, _>>().map_err(usage)?;
    let method = a
        .method
        .clone()
        .unwrap_or_else(|| a.ckpt.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "policy".into()));
    let cfg = &ctx.cfg;
    let make = |kind: TerrainKind, seed: u64| {
        CommandTask::for_evaluation(kind, cfg.commands, cfg.rewards, cfg.simenv.clone(), ctx.morph.clone(), seed)
    };
    let table = evaluate_return(&ck.params, &method, &kinds, a.episodes, make, ctx.seed).map_err(|e| metrics_error(ctx, e))?;
    let csv = table.to_csv();
    let path = ctx.out.join("returns.csv");
    write(&path, csv.as_bytes())?;
    print!("{csv}");
    let mut outputs = vec![path];
    if a.record {
        let mut task = make(kinds[0], derive_seed(ctx.seed, &[u64::MAX])).map_err(|e| train_error(ctx, e))?;
        let records = record_episode(&ck.params, &mut task).map_err(|e| metrics_error(ctx, e))?;
        let mut bytes = Vec::new();
        write_dump(&mut bytes, &records).map_err(|e| CliError::Runtime(e.to_string()))?;
        let dump = ctx.out.join("eval.traj");
        write(&dump, &bytes)?;
        outputs.push(dump);
    }
    Ok(outputs)
}

fn gait(ctx: &Ctx, dump: &Path) -> Result<Vec<PathBuf>, CliError> {
    let file = fs::File::open(dump).map_err(|e| usage(format!("cannot open {}: {e}", dump.display())))?;
    let records = read_dump(BufReader::new(file)).map_err(|e| usage(format!("{}: {e}", dump.display())))?;
    let metrics = gait_metrics_from_dump(&records).map_err(|e| metrics_error(ctx, e))?;
    let csv = metrics.to_csv();
    let path = ctx.out.join("gait.csv");
    write(&path, csv.as_bytes())?;
    print!("{csv}");
    Ok(vec![path])
}

fn manifest(ctx: &Ctx, dataset: Option<PathBuf>) -> Result<Vec<PathBuf>, CliError> {
    let dir = dataset
        .or_else(|| ctx.cfg.paths.dataset.clone())
        .ok_or_else(|| usage("manifest needs --dataset <dir>"))?;
    let m = dataset_manifest(&dir).map_err(|e| usage(format!("{}: {e}", dir.display())))?;
    for w in &m.warnings {
        eprintln!("warning: {w}");
    }
    let csv = m.to_csv();
    let path = ctx.out.join("manifest.csv");
    write(&path, csv.as_bytes())?;
    print!("{csv}");
    Ok(vec![path])
}
