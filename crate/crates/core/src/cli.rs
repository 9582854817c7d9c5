//! Command-line interface.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::config::{ExperimentConfig, Strategy};
use crate::detector::{Checkpoint, DetectorParams};
use crate::error::{Error, Result};
use crate::eval::{evaluate_map_lite, pair_distances, shared_histograms, EvalOptions};
use crate::harness::{ablate, distance_options, run_experiment, train_teacher, Dataset};
use crate::regions::AdapterParams;
use crate::scene::SceneSet;

#[derive(Parser, Debug)]
#[command(name = "rdd", version, about = "Region distillation experiments on synthetic BEV scenes")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Base seed (overrides train.seed).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (overrides train.out).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Config file of `key = value` lines.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Extra `key=value` override, repeatable; applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a scene-set file.
    GenScenes {
        #[arg(long)]
        count: Option<usize>,
        /// File name inside the output directory.
        #[arg(long, default_value = "scenes.rdds")]
        file: String,
    },
    /// Train the teacher and save its checkpoint.
    TrainTeacher,
    /// Train one student.
    TrainStudent {
        #[arg(long)]
        strategy: Option<Strategy>,
        /// Teacher checkpoint (default `<out>/teacher.ckpt`).
        #[arg(long)]
        teacher: Option<PathBuf>,
        /// Fail instead of training a teacher when the checkpoint is missing.
        #[arg(long)]
        no_auto_teacher: bool,
    },
    /// Evaluate a checkpoint on the evaluation scenes.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Patch-distance histograms of two students against a teacher.
    Histogram {
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        pre: PathBuf,
        #[arg(long)]
        post: PathBuf,
    },
    /// Train one student per strategy and write a comparison table.
    Ablate {
        #[arg(long)]
        teacher: Option<PathBuf>,
    },
}

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    let mut sets = Vec::new();
    for s in &common.set {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| Error::Usage(format!("--set expects KEY=VALUE, got {s:?}")))?;
        sets.push((k.trim(), v.trim()));
    }
    cfg.apply(sets)?;
    if let Some(seed) = common.seed {
        cfg.train.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.train.out = out.to_string_lossy().into_owned();
    }
    cfg.check()?;
    Ok(cfg)
}

fn obtain_teacher(cfg: &ExperimentConfig, data: &Dataset, path: Option<&Path>, auto: bool) -> Result<DetectorParams> {
    let default = Path::new(&cfg.train.out).join("teacher.ckpt");
    let path = path.unwrap_or(&default);
    if path.exists() {
        return Checkpoint::load(path)?.params();
    }
    if !auto {
        return Err(Error::Config(format!("teacher checkpoint {} not found", path.display())));
    }
    log::info!("no teacher at {}, training one", path.display());
    let (teacher, _) = train_teacher(cfg, data)?;
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    Checkpoint::from_params(&teacher).save(path)?;
    Ok(teacher)
}

fn save_student(path: &Path, student: &DetectorParams, adapter: &AdapterParams) -> Result<()> {
    let mut ck = Checkpoint::from_params(student);
    ck.tensors.extend(adapter.state_tensors());
    ck.save(path)
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli.common)?;
    let out = PathBuf::from(&cfg.train.out);
    fs::create_dir_all(&out)?;
    match cli.command {
        Command::GenScenes { count, file } => {
            let n = count.unwrap_or(cfg.scene.train_count);
            let set = SceneSet::generate(&cfg.scene.gen, n, cfg.train.seed)?;
            let path = out.join(file);
            set.save(&path)?;
            println!("wrote {n} scenes to {}", path.display());
        }
        Command::TrainTeacher => {
            let data = Dataset::generate(&cfg)?;
            let (teacher, history) = train_teacher(&cfg, &data)?;
            Checkpoint::from_params(&teacher).save(&out.join("teacher.ckpt"))?;
            let map = history.last().and_then(|m| m.eval_map).unwrap_or(0.0);
            println!("teacher mAP-lite {map:.4}; checkpoint {}", out.join("teacher.ckpt").display());
        }
        Command::TrainStudent { strategy, teacher, no_auto_teacher } => {
            let mut cfg = cfg;
            if let Some(s) = strategy {
                cfg.distill.strategy = s;
            }
            let data = Dataset::generate(&cfg)?;
            let t = if cfg.distill.strategy.needs_teacher() {
                Some(obtain_teacher(&cfg, &data, teacher.as_deref(), !no_auto_teacher)?)
            } else {
                None
            };
            let o = run_experiment(&cfg, &data, t.as_ref())?;
            let stem = format!("student_{}", cfg.distill.strategy);
            o.report.save(&out, &stem)?;
            save_student(&out.join(format!("{stem}.ckpt")), &o.student, &o.adapter)?;
            println!("{} student mAP-lite {:.4}; metrics {}", cfg.distill.strategy, o.report.final_map(), out.join(format!("{stem}.csv")).display());
        }
        Command::Eval { checkpoint } => {
            let params = Checkpoint::load(&checkpoint)?.params()?;
            let data = SceneSet::generate(&cfg.scene.gen, cfg.scene.eval_count, cfg.train.seed.wrapping_mul(2).wrapping_add(1))?;
            let opts = EvalOptions { iou_thresh: cfg.train.eval_iou, top_k: cfg.train.eval_top_k, min_score: cfg.train.eval_min_score };
            let ap = evaluate_map_lite(&params, &data.scenes, opts)?;
            let mut csv = String::from("class,AP\n");
            println!("{:<8} {:>8}", "class", "AP");
            for (c, v) in ap.per_class.iter().enumerate() {
                let cell = v.map(|v| format!("{v:.4}")).unwrap_or_else(|| "n/a".into());
                println!("{c:<8} {cell:>8}");
                csv.push_str(&format!("{c},{}\n", v.map(|v| v.to_string()).unwrap_or_default()));
            }
            println!("{:<8} {:>8.4}", "mAP", ap.map);
            csv.push_str(&format!("mAP,{}\n", ap.map));
            fs::write(out.join("eval.csv"), csv)?;
        }
        Command::Histogram { teacher, pre, post } => {
            let t = Checkpoint::load(&teacher)?.params()?;
            let a = Checkpoint::load(&pre)?.params()?;
            let b = Checkpoint::load(&post)?.params()?;
            let data = SceneSet::generate(&cfg.scene.gen, cfg.scene.eval_count, cfg.train.seed.wrapping_mul(2).wrapping_add(1))?;
            let opts = distance_options(&cfg);
            let da = pair_distances(&t, &a, &data.scenes, opts)?;
            let db = pair_distances(&t, &b, &data.scenes, opts)?;
            let (ha, hb) = shared_histograms(&da, &db, cfg.train.hist_bins);
            fs::write(out.join("hist_pre.csv"), ha.to_csv())?;
            fs::write(out.join("hist_post.csv"), hb.to_csv())?;
            println!("upper-half bucket mean: pre {:.3}, post {:.3}", ha.upper_half_mean(), hb.upper_half_mean());
        }
        Command::Ablate { teacher } => {
            let data = Dataset::generate(&cfg)?;
            let t = obtain_teacher(&cfg, &data, teacher.as_deref(), true)?;
            let reports = ablate(&cfg, &data, &t, &Strategy::ALL)?;
            let mut table = String::from("strategy,mAP,mask_fraction\n");
            println!("{:<8} {:>8} {:>14}", "strategy", "mAP", "mask_fraction");
            for r in &reports {
                let mf = mean(&r.mask_fraction_steps);
                println!("{:<8} {:>8.4} {:>14.3}", r.strategy.to_string(), r.final_map(), mf);
                table.push_str(&format!("{},{},{}\n", r.strategy, r.final_map(), mf));
                r.save(&out, &format!("ablate_{}", r.strategy))?;
            }
            fs::write(out.join("ablation.csv"), table)?;
        }
    }
    Ok(())
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Parses `args` (including the program name), runs the command and returns
/// the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
