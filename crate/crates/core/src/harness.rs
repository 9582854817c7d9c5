//! Teacher pre-training, student training under each strategy, run reports.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, Strategy};
use crate::detector::{detection_loss, DetTargets, DetValues, DetectorArch, DetectorParams, WidthMult};
use crate::error::{Error, LoadError, Result};
use crate::eval::{evaluate_map_lite, pair_distances, ApReport, DistanceOptions, EvalOptions};
use crate::losses::{feature_loss, logit_loss, total_loss};
use crate::mask::{disparity_score, mask_fraction, solve_mask, DisparityScore};
use crate::optim::Sgd;
use crate::regions::{build_pairs, extract_proposals, normalize, pair_regions, AdapterParams, PairOptions, Source};
use crate::scene::{Scene, SceneSet};
use crate::tensor::{Tape, Tensor};

/// Independent sub-seed for one purpose of a run.
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const TAG_TEACHER: u64 = 1;
const TAG_STUDENT: u64 = 2;
const TAG_ADAPTER: u64 = 3;
const TAG_SHUFFLE: u64 = 4;

pub struct Dataset {
    pub train: SceneSet,
    pub eval: SceneSet,
}

impl Dataset {
    /// Training and evaluation scenes for the configured seed.
    pub fn generate(cfg: &ExperimentConfig) -> Result<Self> {
        let seed = cfg.train.seed;
        Ok(Self {
            train: SceneSet::generate(&cfg.scene.gen, cfg.scene.train_count, seed.wrapping_mul(2))?,
            eval: SceneSet::generate(&cfg.scene.gen, cfg.scene.eval_count, seed.wrapping_mul(2).wrapping_add(1))?,
        })
    }
}

pub fn teacher_arch(cfg: &ExperimentConfig) -> DetectorArch {
    DetectorArch {
        base: cfg.detector.plan(),
        ..DetectorArch::new(cfg.scene.gen.num_classes, WidthMult::uniform(cfg.detector.teacher_width))
    }
}

pub fn student_arch(cfg: &ExperimentConfig) -> DetectorArch {
    DetectorArch { base: cfg.detector.plan(), ..DetectorArch::new(cfg.scene.gen.num_classes, cfg.detector.student.width()) }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub l_cls: f64,
    pub l_reg: f64,
    pub l_feat: f64,
    pub l_logit: f64,
    pub total: f64,
    pub mask_fraction: f64,
    pub eval_map: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub strategy: Strategy,
    pub seed: u64,
    pub config_digest: String,
    pub config: ExperimentConfig,
    pub epochs: Vec<EpochMetrics>,
    pub final_ap: ApReport,
    /// Fraction of region pairs selected, one entry per step.
    pub mask_fraction_steps: Vec<f64>,
    /// Teacher/student patch distances on the evaluation scenes before and
    /// after training (empty without a teacher).
    pub disparity_pre: Vec<f64>,
    pub disparity_post: Vec<f64>,
    pub wall_clock_s: f64,
}

impl RunReport {
    pub fn final_map(&self) -> f64 {
        self.final_ap.map
    }

    /// The deterministic part of the report (everything but wall-clock).
    pub fn metric_stream(&self) -> (Vec<EpochMetrics>, &ApReport, &[f64], &[f64], &[f64]) {
        (self.epochs.clone(), &self.final_ap, &self.mask_fraction_steps, &self.disparity_pre, &self.disparity_post)
    }

    pub fn metrics_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let io = |e: csv::Error| Error::Io(std::io::Error::other(e));
        w.write_record(["epoch", "L_cls", "L_reg", "L_feat", "L_logit", "total", "mask_fraction", "eval_mAP"])
            .map_err(io)?;
        for m in &self.epochs {
            w.write_record([
                m.epoch.to_string(),
                m.l_cls.to_string(),
                m.l_reg.to_string(),
                m.l_feat.to_string(),
                m.l_logit.to_string(),
                m.total.to_string(),
                m.mask_fraction.to_string(),
                m.eval_map.map(|v| v.to_string()).unwrap_or_default(),
            ])
            .map_err(io)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(std::io::Error::other(e.to_string())))?;
        Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
    }

    /// Writes `<stem>.csv` and `<stem>.json` into `dir`.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(format!("{stem}.csv")), self.metrics_csv()?)?;
        let json = serde_json::to_string_pretty(self).expect("report serializes");
        fs::write(dir.join(format!("{stem}.json")), json)?;
        Ok(())
    }

    /// Reads a JSON report and checks that its digest matches its config.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let r: RunReport = serde_json::from_str(&text).map_err(|e| LoadError::Malformed(format!("report: {e}")))?;
        let digest = r.config.digest();
        if digest != r.config_digest {
            return Err(LoadError::DigestMismatch { expected: digest, found: r.config_digest }.into());
        }
        Ok(r)
    }
}

/// Concatenates single-sample outputs along the batch axis.
fn concat_values(items: &[&DetValues]) -> Result<DetValues> {
    let cat = |f: fn(&DetValues) -> &Tensor| -> Result<Tensor> {
        let parts: Vec<Tensor> = items.iter().map(|v| f(v).index_outer(0)).collect();
        Tensor::stack(&parts)
    };
    Ok(DetValues { neck: cat(|v| &v.neck)?, cls: cat(|v| &v.cls)?, reg: cat(|v| &v.reg)? })
}

struct StepLosses {
    l_cls: f64,
    l_reg: f64,
    l_feat: f64,
    l_logit: f64,
    total: f64,
    mask_fraction: f64,
}

/// One optimizer step on `scenes`. Teacher outputs are precomputed
/// constants; `teacher` is `None` for strategy `none`.
#[allow(clippy::too_many_arguments)]
fn train_step(
    cfg: &ExperimentConfig,
    strategy: Strategy,
    student: &mut DetectorParams,
    adapter: &mut AdapterParams,
    opt: &mut Sgd,
    scenes: &[&Scene],
    teacher: Option<&DetValues>,
    lr: f64,
    step: usize,
) -> Result<StepLosses> {
    let d = &cfg.distill.params;
    let bevs: Vec<Tensor> = scenes.iter().map(|s| s.bev.clone()).collect();
    let bev = Tensor::stack(&bevs)?;
    let tape = Tape::new();
    let sp = student.bind(&tape, true);
    let out = sp.forward(&tape, &bev)?;
    let [_, k, h, w] = {
        let s = out.cls.shape();
        [s[0], s[1], s[2], s[3]]
    };
    let targets = DetTargets::build(scenes, k, h, w)?;
    let (l_cls, l_reg) = detection_loss(&out, &targets)?;
    let ad = adapter.bind(&tape, true);
    let zero = || tape.constant(Tensor::scalar(0.0));

    let (l_feat, l_logit, frac, stats) = match (strategy, teacher) {
        (Strategy::None, _) => (zero(), zero(), 0.0, Default::default()),
        (_, None) => return Err(Error::Config(format!("strategy {strategy} needs a teacher"))),
        (Strategy::Hint, Some(t)) => {
            let (adapted, stats) = ad.forward(out.neck, true)?;
            let s_map = normalize(adapted, d.tau, d.norm)?;
            let t_map = normalize(tape.constant(t.neck.clone()), d.tau, d.norm)?;
            let f = feature_loss(s_map, t_map, &vec![1.0; scenes.len()], d.squared_feat)?;
            (f, zero(), 1.0, stats)
        }
        (Strategy::Equal | Strategy::Rdd, Some(t)) => {
            let s_vals = out.values();
            let mut t_props = Vec::new();
            let mut s_props = Vec::new();
            for b in 0..scenes.len() {
                t_props.extend(extract_proposals(t, b, d.top_k, d.min_score, Source::Teacher));
                s_props.extend(extract_proposals(&s_vals, b, d.top_k, d.min_score, Source::Student));
            }
            let specs = pair_regions(&t_props, &s_props);
            let opts = PairOptions { roi_res: d.roi_res, tau: d.tau, norm: d.norm };
            let pb = build_pairs(&tape, t, &out, &ad, specs, opts, true)?;
            let mask = if strategy == Strategy::Equal {
                vec![1.0; pb.len()]
            } else {
                let scores = pb
                    .to_pairs()
                    .iter()
                    .map(|p| disparity_score(&p.student_patch, &p.teacher_patch, d.kappa).map(|s| s.mi_proxy))
                    .collect::<Result<Vec<_>>>()?;
                if log::log_enabled!(log::Level::Debug) && !scores.is_empty() {
                    let mut s = scores.clone();
                    s.sort_by(f64::total_cmp);
                    let q = |f: f64| s[((s.len() - 1) as f64 * f) as usize];
                    log::debug!("step {step}: scores q10 {:.3} q50 {:.3} q90 {:.3}", q(0.1), q(0.5), q(0.9));
                }
                solve_mask(&scores, d.lambda)
            };
            let f = feature_loss(pb.student_patches, pb.teacher_patches, &mask, d.squared_feat)?;
            let l = logit_loss(pb.student_cls, pb.teacher_cls, pb.student_reg, pb.teacher_reg, &mask, d.anchor_style_logits)?;
            (f, l, mask_fraction(&mask), pb.adapter_stats)
        }
    };

    let total = total_loss(l_cls, l_reg, l_feat, l_logit, d)?;
    let losses = StepLosses {
        l_cls: l_cls.value().item(),
        l_reg: l_reg.value().item(),
        l_feat: l_feat.value().item(),
        l_logit: l_logit.value().item(),
        total: total.value().item(),
        mask_fraction: frac,
    };
    if !losses.total.is_finite() {
        return Err(Error::Training {
            seed: cfg.train.seed,
            step,
            reason: format!("non-finite loss (cls {}, reg {}, feat {}, logit {})", losses.l_cls, losses.l_reg, losses.l_feat, losses.l_logit),
        });
    }
    let g = tape.backward(total)?;
    let mut grads = sp.grads(&g);
    for (name, v) in [("adapter.w", ad.kernel), ("adapter.gamma", ad.gamma), ("adapter.beta", ad.beta)] {
        if let Some(t) = g.get(v) {
            grads.insert(name.to_string(), t.clone());
        }
    }
    let mut params = std::mem::take(&mut student.tensors);
    params.extend(adapter.tensors());
    opt.step(&mut params, &grads, lr);
    let adapter_names: Vec<String> = params.keys().filter(|k| k.starts_with("adapter.")).cloned().collect();
    let adapter_tensors: BTreeMap<String, Tensor> =
        adapter_names.into_iter().filter_map(|k| params.remove_entry(&k)).collect();
    adapter.load_tensors(&adapter_tensors);
    student.tensors = params;
    stats.apply(adapter);
    Ok(losses)
}

pub struct RunOutcome {
    pub report: RunReport,
    pub student: DetectorParams,
    pub adapter: AdapterParams,
}

fn eval_options(cfg: &ExperimentConfig) -> EvalOptions {
    EvalOptions { iou_thresh: cfg.train.eval_iou, top_k: cfg.train.eval_top_k, min_score: cfg.train.eval_min_score }
}

pub fn distance_options(cfg: &ExperimentConfig) -> DistanceOptions {
    let d = &cfg.distill.params;
    DistanceOptions { top_k: d.top_k, min_score: d.min_score, roi_res: d.roi_res, tau: d.tau }
}

#[allow(clippy::too_many_arguments)]
fn fit(
    cfg: &ExperimentConfig,
    strategy: Strategy,
    mut params: DetectorParams,
    mut adapter: AdapterParams,
    data: &Dataset,
    teacher_cache: Option<&[DetValues]>,
    epochs: usize,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<(DetectorParams, AdapterParams, Vec<EpochMetrics>, Vec<f64>)> {
    let t = &cfg.train;
    let n = data.train.len();
    let steps_per_epoch = n.div_ceil(t.batch_size);
    let total_steps = steps_per_epoch * epochs;
    let clip = (t.clip_norm > 0.0).then_some(t.clip_norm);
    let mut opt = Sgd::new(t.momentum, t.weight_decay, clip);
    let mut history = Vec::with_capacity(epochs);
    let mut fractions = Vec::with_capacity(total_steps);
    let mut step = 0;
    for epoch in 0..epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(t.seed, TAG_SHUFFLE) ^ epoch as u64));
        let mut sums = [0.0; 6];
        for chunk in order.chunks(t.batch_size) {
            let scenes: Vec<&Scene> = chunk.iter().map(|&i| &data.train.scenes[i]).collect();
            let t_batch = match teacher_cache {
                Some(cache) => Some(concat_values(&chunk.iter().map(|&i| &cache[i]).collect::<Vec<_>>())?),
                None => None,
            };
            let lr = t.lr.at(step, total_steps);
            let l = train_step(cfg, strategy, &mut params, &mut adapter, &mut opt, &scenes, t_batch.as_ref(), lr, step)?;
            for (s, v) in sums.iter_mut().zip([l.l_cls, l.l_reg, l.l_feat, l.l_logit, l.total, l.mask_fraction]) {
                *s += v;
            }
            fractions.push(l.mask_fraction);
            step += 1;
        }
        let m = steps_per_epoch.max(1) as f64;
        let eval_map = if (epoch + 1) % t.eval_every == 0 || epoch + 1 == epochs {
            Some(evaluate_map_lite(&params, &data.eval.scenes, eval_options(cfg))?.map)
        } else {
            None
        };
        let metrics = EpochMetrics {
            epoch,
            l_cls: sums[0] / m,
            l_reg: sums[1] / m,
            l_feat: sums[2] / m,
            l_logit: sums[3] / m,
            total: sums[4] / m,
            mask_fraction: sums[5] / m,
            eval_map,
        };
        log::info!(
            "{strategy} epoch {epoch}: total {:.4} cls {:.4} reg {:.4} feat {:.4} logit {:.4} mask {:.3} mAP {}",
            metrics.total,
            metrics.l_cls,
            metrics.l_reg,
            metrics.l_feat,
            metrics.l_logit,
            metrics.mask_fraction,
            eval_map.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into())
        );
        on_epoch(&metrics);
        history.push(metrics);
    }
    Ok((params, adapter, history, fractions))
}

/// Trains the teacher with detection losses only.
pub fn train_teacher(cfg: &ExperimentConfig, data: &Dataset) -> Result<(DetectorParams, Vec<EpochMetrics>)> {
    cfg.check()?;
    let arch = teacher_arch(cfg);
    let params = DetectorParams::init(arch, derive_seed(cfg.train.seed, TAG_TEACHER));
    let c = params.arch.neck_channels();
    let adapter = AdapterParams::init(c, c, 0);
    let (params, _, history, _) = fit(cfg, Strategy::None, params, adapter, data, None, cfg.train.teacher_epochs, |_| {})?;
    let map = history.last().and_then(|m| m.eval_map).unwrap_or(0.0);
    if map < cfg.train.teacher_min_map {
        return Err(Error::Training {
            seed: cfg.train.seed,
            step: data.train.len().div_ceil(cfg.train.batch_size) * cfg.train.teacher_epochs,
            reason: format!("teacher mAP-lite {map:.4} is below the floor {}", cfg.train.teacher_min_map),
        });
    }
    Ok((params, history))
}

/// Trains a student under `cfg.distill.strategy`.
pub fn run_experiment(cfg: &ExperimentConfig, data: &Dataset, teacher: Option<&DetectorParams>) -> Result<RunOutcome> {
    cfg.check()?;
    let started = Instant::now();
    let strategy = cfg.distill.strategy;
    if strategy.needs_teacher() && teacher.is_none() {
        return Err(Error::Config(format!("strategy {strategy} needs a teacher checkpoint")));
    }
    let student = DetectorParams::init(student_arch(cfg), derive_seed(cfg.train.seed, TAG_STUDENT));
    let c_t = match teacher {
        Some(t) => {
            let (tn, sn) = (t.arch.num_classes, student.arch.num_classes);
            if tn != sn {
                return Err(Error::Config(format!("teacher has {tn} classes, student {sn}")));
            }
            t.arch.neck_channels()
        }
        None => student.arch.neck_channels(),
    };
    let adapter = AdapterParams::init(student.arch.neck_channels(), c_t, derive_seed(cfg.train.seed, TAG_ADAPTER));

    let dopts = distance_options(cfg);
    let disparity_pre = match teacher {
        Some(t) => pair_distances(t, &student, &data.eval.scenes, dopts)?,
        None => Vec::new(),
    };
    let cache = match (strategy, teacher) {
        (Strategy::None, _) | (_, None) => None,
        (_, Some(t)) => Some(data.train.scenes.iter().map(|s| t.infer(&s.bev)).collect::<Result<Vec<_>>>()?),
    };
    let (student, adapter, epochs, fractions) =
        fit(cfg, strategy, student, adapter, data, cache.as_deref(), cfg.train.epochs, |_| {})?;
    let final_ap = evaluate_map_lite(&student, &data.eval.scenes, eval_options(cfg))?;
    let disparity_post = match teacher {
        Some(t) => pair_distances(t, &student, &data.eval.scenes, dopts)?,
        None => Vec::new(),
    };
    let report = RunReport {
        strategy,
        seed: cfg.train.seed,
        config_digest: cfg.digest(),
        config: cfg.clone(),
        epochs,
        final_ap,
        mask_fraction_steps: fractions,
        disparity_pre,
        disparity_post,
        wall_clock_s: started.elapsed().as_secs_f64(),
    };
    Ok(RunOutcome { report, student, adapter })
}

/// Runs each strategy on the same data, teacher and student initialization.
pub fn ablate(cfg: &ExperimentConfig, data: &Dataset, teacher: &DetectorParams, strategies: &[Strategy]) -> Result<Vec<RunReport>> {
    strategies
        .iter()
        .map(|&s| {
            let mut c = cfg.clone();
            c.distill.strategy = s;
            run_experiment(&c, data, Some(teacher)).map(|o| o.report)
        })
        .collect()
}

/// Disparity scores of the region pairs a student forms with the teacher
/// on `scenes` (eval-mode adapter).
pub fn pair_scores(
    cfg: &ExperimentConfig,
    teacher: &DetectorParams,
    student: &DetectorParams,
    adapter: &AdapterParams,
    scenes: &[Scene],
) -> Result<Vec<DisparityScore>> {
    if scenes.is_empty() {
        return Ok(Vec::new());
    }
    let d = &cfg.distill.params;
    let tape = Tape::new();
    let bevs: Vec<Tensor> = scenes.iter().map(|s| s.bev.clone()).collect();
    let out = student.bind(&tape, false).forward(&tape, &Tensor::stack(&bevs)?)?;
    let t_single: Vec<DetValues> = scenes.iter().map(|s| teacher.infer(&s.bev)).collect::<Result<_>>()?;
    let t = concat_values(&t_single.iter().collect::<Vec<_>>())?;
    let s_vals = out.values();
    let mut t_props = Vec::new();
    let mut s_props = Vec::new();
    for b in 0..scenes.len() {
        t_props.extend(extract_proposals(&t, b, d.top_k, d.min_score, Source::Teacher));
        s_props.extend(extract_proposals(&s_vals, b, d.top_k, d.min_score, Source::Student));
    }
    let ad = adapter.bind(&tape, false);
    let opts = PairOptions { roi_res: d.roi_res, tau: d.tau, norm: d.norm };
    let pb = build_pairs(&tape, &t, &out, &ad, pair_regions(&t_props, &s_props), opts, false)?;
    pb.to_pairs().iter().map(|p| disparity_score(&p.student_patch, &p.teacher_patch, d.kappa)).collect()
}

/// Fraction of pairs selected at each λ, for one fixed set of scores.
pub fn mask_fraction_sweep(scores: &[DisparityScore], lambdas: &[f64]) -> Vec<f64> {
    let s: Vec<f64> = scores.iter().map(|d| d.mi_proxy).collect();
    lambdas.iter().map(|&l| mask_fraction(&solve_mask(&s, l))).collect()
}
