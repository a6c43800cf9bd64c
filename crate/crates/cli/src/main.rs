//! `msa`: generate synthetic data, train, evaluate, run ablations and dump
//! diagnostics.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Arg, ArgAction, ArgMatches, Command};

use msa_core::boxes::BBox;
use msa_core::harness::dataset::{load_predictions, read_text};
use msa_core::harness::eval::{decode_predictions, infer_image, oks_config, write_outputs};
use msa_core::harness::gradsuite::gradient_suite;
use msa_core::harness::train::{checkpoint_path, model_config_path};
use msa_core::harness::{
    ablate, dump, evaluate_split, generate_dataset, load_model, train, Dataset, DatasetMeta, RgbImage, RunConfig, SceneConfig,
};
use msa_core::kv::KvMap;
use msa_core::oks::evaluate;
use msa_core::{Error, Precision, Scalar};

const SCENE_KEYS: [&str; 3] = ["min_height", "max_height", "max_persons"];

fn flag(key: &'static str) -> Arg {
    Arg::new(key).long(key.replace('_', "-")).alias(key).value_name("VALUE").num_args(1)
}

fn run_flags(cmd: Command) -> Command {
    let cmd = cmd.arg(
        Arg::new("config")
            .long("config")
            .value_name("FILE")
            .help("key=value file; flags override its values"),
    );
    RunConfig::keys().into_iter().fold(cmd, |c, k| c.arg(flag(k)))
}

fn cli() -> Command {
    let path = |name: &'static str, help: &'static str| Arg::new(name).long(name).value_name("PATH").help(help);
    Command::new("msa")
        .about("Multi-scale RoI keypoint models on synthetic stick-figure scenes")
        .subcommand_required(true)
        .arg_required_else_help(true)
        .subcommand(SCENE_KEYS.iter().fold(
            run_flags(Command::new("generate").about("Render a synthetic dataset into data_dir")),
            |c, &k| c.arg(flag(k)),
        ))
        .subcommand(run_flags(
            Command::new("train").about("Train on data_dir, writing checkpoints into out_dir"),
        ))
        .subcommand(
            run_flags(Command::new("eval").about("Evaluate a checkpoint, or score a prediction file, on the validation split"))
                .arg(path("checkpoint", "checkpoint file (default: out_dir/model.ckpt)"))
                .arg(path(
                    "model-config",
                    "model.cfg of the checkpoint (default: next to the checkpoint)",
                ))
                .arg(path("predictions", "score this prediction file instead of running a model")),
        )
        .subcommand(run_flags(
            Command::new("ablate").about("Train and evaluate the ablation ladder over every seed"),
        ))
        .subcommand(
            run_flags(Command::new("dump-heatmaps").about("Write per-keypoint heatmaps and a skeleton overlay"))
                .arg(path("checkpoint", "checkpoint file (default: out_dir/model.ckpt)"))
                .arg(path(
                    "model-config",
                    "model.cfg of the checkpoint (default: next to the checkpoint)",
                ))
                .arg(path("image", "PPM image; needs --boxes"))
                .arg(
                    Arg::new("boxes")
                        .long("boxes")
                        .value_name("x1,y1,x2,y2;...")
                        .help("person boxes for --image"),
                )
                .arg(
                    Arg::new("image-id")
                        .long("image-id")
                        .value_name("N")
                        .value_parser(clap::value_parser!(u32))
                        .help("validation image to dump (default 0)"),
                )
                .arg(path("dump-dir", "output directory (default: out_dir/heatmaps)")),
        )
        .subcommand(
            Command::new("grad-check")
                .about("Finite-difference check of every differentiable op and the keypoint branch")
                .arg(
                    Arg::new("seed")
                        .long("seed")
                        .value_parser(clap::value_parser!(u64))
                        .default_value("0"),
                )
                .arg(Arg::new("quiet").long("quiet").short('q').action(ArgAction::SetTrue)),
        )
}

/// Config file values, then explicit flags.
fn overrides(m: &ArgMatches, extra: &[&str]) -> anyhow::Result<KvMap> {
    let mut kv = match m.get_one::<String>("config") {
        Some(p) => KvMap::parse(&read_text(Path::new(p))?)?,
        None => KvMap::new(),
    };
    for k in RunConfig::keys().into_iter().chain(extra.iter().copied()) {
        if let Some(v) = m.get_one::<String>(k) {
            kv.set(k, v);
        }
    }
    Ok(kv)
}

fn run_config(m: &ArgMatches, extra: &[&str]) -> anyhow::Result<(RunConfig, KvMap)> {
    let kv = overrides(m, extra)?;
    let mut run = kv.clone();
    for k in extra {
        run.remove(k);
    }
    let cfg = RunConfig::from_kv(&run)?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads)
        .build_global()
        .map_err(|e| anyhow!("thread pool: {e}"))?;
    Ok((cfg, kv))
}

fn load_dataset(cfg: &RunConfig) -> anyhow::Result<Dataset> {
    let mut data = Dataset::load(&cfg.data_dir).with_context(|| format!("loading dataset from {}", cfg.data_dir.display()))?;
    if cfg.num_train > 0 {
        data.train = data.train.truncated(cfg.num_train);
    }
    if cfg.num_val > 0 {
        data.val = data.val.truncated(cfg.num_val);
    }
    Ok(data)
}

fn save_run_config(cfg: &RunConfig) -> anyhow::Result<()> {
    std::fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(&cfg.out_dir, e))?;
    let p = cfg.out_dir.join("run.cfg");
    std::fs::write(&p, cfg.to_kv().render()).map_err(|e| Error::io(&p, e))?;
    Ok(())
}

fn generate(m: &ArgMatches) -> anyhow::Result<()> {
    let (cfg, kv) = run_config(m, &SCENE_KEYS)?;
    let mut scene = SceneConfig {
        image_size: cfg.model.image_size,
        ..SceneConfig::default()
    };
    kv.read("min_height", &mut scene.min_height)?;
    kv.read("max_height", &mut scene.max_height)?;
    kv.read("max_persons", &mut scene.max_persons)?;
    let defaults = DatasetMeta::default();
    let meta = DatasetMeta {
        scene,
        num_keypoints: cfg.model.num_keypoints,
        num_train: if cfg.num_train == 0 { defaults.num_train } else { cfg.num_train },
        num_val: if cfg.num_val == 0 { defaults.num_val } else { cfg.num_val },
        seed: cfg.seed,
    };
    let data = generate_dataset(&cfg.data_dir, &meta)?;
    let persons: usize = data.train.annotations.iter().chain(&data.val.annotations).map(Vec::len).sum();
    println!(
        "wrote {} train + {} val images ({persons} persons) to {}",
        data.train.len(),
        data.val.len(),
        cfg.data_dir.display()
    );
    Ok(())
}

fn train_as<T: Scalar>(cfg: &RunConfig, data: &Dataset) -> anyhow::Result<()> {
    let out = train::<T>(cfg, &data.train)?;
    for (e, l) in out.epoch_losses.iter().enumerate() {
        println!(
            "epoch {e}: loss {:.4} (cls {:.4} bbox {:.4} kps {:.4})",
            l.total, l.cls, l.bbox, l.kps
        );
    }
    println!("checkpoint: {}", out.checkpoint.display());
    Ok(())
}

fn train_cmd(m: &ArgMatches) -> anyhow::Result<()> {
    let (cfg, _) = run_config(m, &[])?;
    let data = load_dataset(&cfg)?;
    save_run_config(&cfg)?;
    match cfg.precision {
        Precision::F32 => train_as::<f32>(&cfg, &data),
        Precision::F64 => train_as::<f64>(&cfg, &data),
    }
}

fn checkpoint_paths(m: &ArgMatches, cfg: &RunConfig) -> (PathBuf, PathBuf) {
    let ckpt = m
        .get_one::<String>("checkpoint")
        .map(PathBuf::from)
        .unwrap_or_else(|| checkpoint_path(&cfg.out_dir));
    let mcfg = m
        .get_one::<String>("model-config")
        .map(PathBuf::from)
        .unwrap_or_else(|| model_config_path(ckpt.parent().unwrap_or(Path::new("."))));
    (ckpt, mcfg)
}

fn eval_as<T: Scalar>(m: &ArgMatches, cfg: &RunConfig, data: &Dataset) -> anyhow::Result<()> {
    let (ckpt, mcfg) = checkpoint_paths(m, cfg);
    let model = load_model::<T>(&mcfg, &ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
    let mut cfg = cfg.clone();
    cfg.model = model.cfg.clone();
    let report = evaluate_split(&model, &data.val, &cfg, &cfg.out_dir)?;
    print!("{}", report.to_key_value());
    Ok(())
}

fn eval_cmd(m: &ArgMatches) -> anyhow::Result<()> {
    let (cfg, _) = run_config(m, &[])?;
    let data = load_dataset(&cfg)?;
    if let Some(p) = m.get_one::<String>("predictions") {
        let preds = load_predictions(Path::new(p), cfg.model.num_keypoints)?;
        let report = evaluate(&preds, &data.val.all_annotations(), &oks_config(&cfg))?;
        write_outputs(&cfg.out_dir, &preds, &report)?;
        print!("{}", report.to_key_value());
        return Ok(());
    }
    match cfg.precision {
        Precision::F32 => eval_as::<f32>(m, &cfg, &data),
        Precision::F64 => eval_as::<f64>(m, &cfg, &data),
    }
}

fn ablate_cmd(m: &ArgMatches) -> anyhow::Result<()> {
    let (cfg, _) = run_config(m, &[])?;
    let data = load_dataset(&cfg)?;
    save_run_config(&cfg)?;
    let mut log = |s: &str| eprintln!("{s}");
    let result = match cfg.precision {
        Precision::F32 => ablate::<f32>(&cfg, &data, &mut log)?,
        Precision::F64 => ablate::<f64>(&cfg, &data, &mut log)?,
    };
    print!("{}", result.table());
    Ok(())
}

fn parse_boxes(s: &str) -> anyhow::Result<Vec<BBox>> {
    s.split(';')
        .filter(|b| !b.trim().is_empty())
        .map(|b| {
            let v: Vec<f64> = b
                .split(',')
                .map(|x| x.trim().parse::<f64>())
                .collect::<Result<_, _>>()
                .map_err(|e| Error::Config(format!("bad box `{b}`: {e}")))?;
            match v[..] {
                [x1, y1, x2, y2] if x2 > x1 && y2 > y1 => Ok(BBox::new(x1, y1, x2, y2)),
                _ => Err(Error::Config(format!("box `{b}` must be x1,y1,x2,y2 with positive extent")).into()),
            }
        })
        .collect()
}

fn dump_as<T: Scalar>(m: &ArgMatches, cfg: &RunConfig) -> anyhow::Result<()> {
    let (ckpt, mcfg) = checkpoint_paths(m, cfg);
    let model = load_model::<T>(&mcfg, &ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
    let dir = m
        .get_one::<String>("dump-dir")
        .map(PathBuf::from)
        .unwrap_or_else(|| cfg.out_dir.join("heatmaps"));
    let (image, hm, preds) = if let Some(p) = m.get_one::<String>("image") {
        let image = RgbImage::load(Path::new(p))?;
        let boxes = parse_boxes(
            m.get_one::<String>("boxes")
                .ok_or_else(|| Error::Config("--image needs --boxes".into()))?,
        )?;
        let (input, _) = image.to_input::<T>(1.0, false)?;
        let hm = model.keypoint_heatmaps(&input, &boxes)?;
        let preds = decode_predictions(&hm, &vec![1.0; boxes.len()], 0, cfg.decode);
        (image, hm, preds)
    } else {
        let data = load_dataset(cfg)?;
        let id = m.get_one::<u32>("image-id").copied().unwrap_or(0);
        let i = id as usize;
        if i >= data.val.len() {
            return Err(Error::Config(format!("image-id {id} outside the {}-image validation split", data.val.len())).into());
        }
        let inf = infer_image(&model, &data.val.images[i], &data.val.annotations[i], id, cfg)?;
        let preds = decode_predictions(&inf.heatmaps, &inf.scores, id, cfg.decode);
        (data.val.images[i].clone(), inf.heatmaps, preds)
    };
    let files = dump::dump_heatmaps(&dir, &image, &hm, &preds)?;
    println!("wrote {} heatmaps and overlay.ppm to {}", files.len(), dir.display());
    Ok(())
}

fn dump_cmd(m: &ArgMatches) -> anyhow::Result<()> {
    let (cfg, _) = run_config(m, &[])?;
    match cfg.precision {
        Precision::F32 => dump_as::<f32>(m, &cfg),
        Precision::F64 => dump_as::<f64>(m, &cfg),
    }
}

fn grad_check_cmd(m: &ArgMatches) -> anyhow::Result<()> {
    let entries = gradient_suite(*m.get_one::<u64>("seed").expect("has default"))?;
    let quiet = m.get_flag("quiet");
    let mut failed = Vec::new();
    for e in &entries {
        if !quiet || !e.passed() {
            println!(
                "{:<36} max_rel_err={:.3e} tol={:.0e} checked={} {}",
                e.name,
                e.max_rel_error,
                e.tolerance,
                e.checked,
                if e.passed() { "ok" } else { "FAIL" }
            );
        }
        if !e.passed() {
            failed.push(e.name.clone());
        }
    }
    if failed.is_empty() {
        println!("all {} gradient checks passed", entries.len());
        Ok(())
    } else {
        Err(Error::Numerical(format!("gradient check failed for {}", failed.join(", "))).into())
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.chain().find_map(|e| e.downcast_ref::<Error>()) {
        Some(Error::Config(_)) => 2,
        Some(Error::Numerical(_)) => 4,
        Some(_) => 3,
        None => 1,
    }
}

fn main() -> ExitCode {
    let matches = match cli().try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    let result = match matches.subcommand() {
        Some(("generate", m)) => generate(m),
        Some(("train", m)) => train_cmd(m),
        Some(("eval", m)) => eval_cmd(m),
        Some(("ablate", m)) => ablate_cmd(m),
        Some(("dump-heatmaps", m)) => dump_cmd(m),
        Some(("grad-check", m)) => grad_check_cmd(m),
        _ => unreachable!("subcommand required"),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cli_is_well_formed() {
        cli().debug_assert();
    }

    #[test]
    fn boxes_parse() {
        let b = parse_boxes("1,2,30,40; 5,6,7,8").unwrap();
        assert_eq!(b, vec![BBox::new(1.0, 2.0, 30.0, 40.0), BBox::new(5.0, 6.0, 7.0, 8.0)]);
        assert!(parse_boxes("1,2,3").is_err());
        assert!(parse_boxes("5,5,1,1").is_err());
    }
}
