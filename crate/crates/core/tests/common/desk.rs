//! Desk-scale experiments behind the direction checks: five seeds, one
//! teacher per seed, and every student variant trained on identical data,
//! initialization and batch order.

use std::io::Write;
use std::time::Instant;

use rdd::config::{ExperimentConfig, Strategy};
use rdd::eval::shared_histograms;
use rdd::harness::{mask_fraction_sweep, pair_scores, run_experiment, train_teacher, Dataset, RunOutcome};

pub const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];
pub const LAMBDAS: [f64; 5] = [0.0, 0.05, 0.1, 0.5, 1.0];
/// Per-run wall-clock budget, seconds.
pub const RUN_BUDGET_S: f64 = 600.0;
/// Noise allowance of the component-ablation check, in mAP-lite.
pub const ABLATION_NOISE: f64 = 0.005;
/// Required mean gain of rdd over none, in mAP-lite (0-1 scale).
pub const MIN_GAIN: f64 = 0.02;

pub fn desk_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.apply([
        ("scene.extent", "25.6"),
        ("scene.max_objects", "5"),
        ("scene.train_count", "128"),
        ("scene.eval_count", "48"),
        ("train.teacher_epochs", "20"),
        ("train.epochs", "12"),
        ("train.eval_every", "12"),
        ("scene.num_classes", "4"),
        ("scene.max_distractors", "6"),
        ("scene.clutter_density", "0.15"),
        ("scene.intensity_noise", "0.2"),
    ])
    .expect("valid overrides");
    cfg
}

/// Final mAP-lite of every variant at one seed.
#[derive(Clone, Debug, Default)]
pub struct SeedResult {
    pub teacher: f64,
    pub none: f64,
    pub hint: f64,
    pub equal: f64,
    pub rdd: f64,
    pub feat_only: f64,
    pub logit_only: f64,
    /// mAP-lite at each entry of [`LAMBDAS`].
    pub lambda_curve: Vec<f64>,
    /// Mask fraction at each entry of [`LAMBDAS`] for one fixed set of
    /// region-pair scores.
    pub lambda_fractions: Vec<f64>,
    pub upper_half_none: f64,
    pub upper_half_rdd: f64,
    pub slowest_run_s: f64,
}

fn variant(base: &ExperimentConfig, strategy: Strategy, edit: impl FnOnce(&mut ExperimentConfig)) -> ExperimentConfig {
    let mut c = base.clone();
    c.distill.strategy = strategy;
    edit(&mut c);
    c
}

pub fn run_seed(base: &ExperimentConfig, seed: u64) -> SeedResult {
    let mut cfg = base.clone();
    cfg.train.seed = seed;
    let data = Dataset::generate(&cfg).expect("scenes");
    let (teacher, history) = train_teacher(&cfg, &data).expect("teacher trains");
    let mut res = SeedResult { teacher: history.last().and_then(|m| m.eval_map).unwrap_or(0.0), ..Default::default() };

    let mut slowest = 0.0f64;
    let mut run = |c: ExperimentConfig| -> RunOutcome {
        let t0 = Instant::now();
        let o = run_experiment(&c, &data, Some(&teacher)).expect("student trains");
        slowest = slowest.max(t0.elapsed().as_secs_f64());
        o
    };

    let none = run(variant(&cfg, Strategy::None, |_| {}));
    let rdd = run(variant(&cfg, Strategy::Rdd, |_| {}));
    res.none = none.report.final_map();
    res.rdd = rdd.report.final_map();
    res.hint = run(variant(&cfg, Strategy::Hint, |_| {})).report.final_map();
    res.equal = run(variant(&cfg, Strategy::Equal, |_| {})).report.final_map();
    res.feat_only = run(variant(&cfg, Strategy::Rdd, |c| c.distill.params.alpha_logit = 0.0)).report.final_map();
    res.logit_only = run(variant(&cfg, Strategy::Rdd, |c| c.distill.params.alpha_feat = 0.0)).report.final_map();

    let default_lambda = cfg.distill.params.lambda;
    for &l in &LAMBDAS {
        let map = if l == default_lambda {
            res.rdd
        } else {
            run(variant(&cfg, Strategy::Rdd, |c| c.distill.params.lambda = l)).report.final_map()
        };
        res.lambda_curve.push(map);
    }

    let scores = pair_scores(&cfg, &teacher, &rdd.student, &rdd.adapter, &data.eval.scenes).expect("scores");
    res.lambda_fractions = mask_fraction_sweep(&scores, &LAMBDAS);

    let (h_none, h_rdd) = shared_histograms(&none.report.disparity_post, &rdd.report.disparity_post, cfg.train.hist_bins);
    res.upper_half_none = h_none.upper_half_mean();
    res.upper_half_rdd = h_rdd.upper_half_mean();
    res.slowest_run_s = slowest;
    res
}

fn mean(v: impl IntoIterator<Item = f64>) -> f64 {
    let v: Vec<f64> = v.into_iter().collect();
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

/// Index of the first maximum.
fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Results of every seed, with one check per criterion.
pub struct DeskSummary {
    pub results: Vec<SeedResult>,
}

impl DeskSummary {
    pub fn run() -> Self {
        let cfg = desk_config();
        let results = SEEDS
            .iter()
            .map(|&s| {
                let r = run_seed(&cfg, s);
                // direct to stdout so progress shows under output capture
                let _ = writeln!(
                    std::io::stdout().lock(),
                    "desk seed {s}: teacher {:.4} none {:.4} hint {:.4} equal {:.4} rdd {:.4} feat {:.4} logit {:.4} ({:.0}s slowest run)",
                    r.teacher, r.none, r.hint, r.equal, r.rdd, r.feat_only, r.logit_only, r.slowest_run_s
                );
                r
            })
            .collect();
        Self { results }
    }

    fn mean_of(&self, f: fn(&SeedResult) -> f64) -> f64 {
        mean(self.results.iter().map(f))
    }

    pub fn direction(&self) -> (bool, String) {
        let (none, hint) = (self.mean_of(|r| r.none), self.mean_of(|r| r.hint));
        let (equal, rdd, teacher) = (self.mean_of(|r| r.equal), self.mean_of(|r| r.rdd), self.mean_of(|r| r.teacher));
        let slowest = self.results.iter().map(|r| r.slowest_run_s).fold(0.0, f64::max);
        let ok = rdd > equal && equal >= none && rdd > hint && rdd - none >= MIN_GAIN && slowest < RUN_BUDGET_S;
        let detail = format!(
            "mean mAP-lite teacher {teacher:.4}, none {none:.4}, hint {hint:.4}, equal {equal:.4}, rdd {rdd:.4}; \
             rdd-none {:+.2} points; slowest run {slowest:.0}s",
            100.0 * (rdd - none)
        );
        (ok, detail)
    }

    pub fn ablation(&self) -> (bool, String) {
        let (none, rdd) = (self.mean_of(|r| r.none), self.mean_of(|r| r.rdd));
        let (feat, logit) = (self.mean_of(|r| r.feat_only), self.mean_of(|r| r.logit_only));
        let ok = feat > none && logit > none && rdd >= feat.max(logit) - ABLATION_NOISE;
        (ok, format!("mean mAP-lite none {none:.4}, feature-only {feat:.4}, logit-only {logit:.4}, both {rdd:.4}"))
    }

    pub fn histogram(&self) -> (bool, String) {
        let shifted = self.results.iter().filter(|r| r.upper_half_rdd < r.upper_half_none).count();
        let per_seed: Vec<String> =
            self.results.iter().map(|r| format!("{:.2}/{:.2}", r.upper_half_none, r.upper_half_rdd)).collect();
        (
            shifted == self.results.len(),
            format!(
                "upper-half bucket means none/rdd per seed [{}]; smaller for rdd in {shifted}/{}",
                per_seed.join(", "),
                self.results.len()
            ),
        )
    }

    /// `(fraction monotone, interior maximum in >= 3 seeds, detail)`.
    pub fn lambda_sweep(&self) -> (bool, bool, String) {
        let monotone = self.results.iter().all(|r| r.lambda_fractions.windows(2).all(|w| w[1] <= w[0]));
        let interior = self
            .results
            .iter()
            .filter(|r| {
                let k = argmax(&r.lambda_curve);
                k > 0 && k + 1 < r.lambda_curve.len()
            })
            .count();
        let curves: Vec<String> = self
            .results
            .iter()
            .map(|r| r.lambda_curve.iter().map(|v| format!("{v:.3}")).collect::<Vec<_>>().join("/"))
            .collect();
        let fractions: Vec<String> = self
            .results
            .iter()
            .map(|r| r.lambda_fractions.iter().map(|v| format!("{v:.2}")).collect::<Vec<_>>().join("/"))
            .collect();
        let detail = format!(
            "mask fraction non-increasing {monotone} [{}]; interior mAP maximum in {interior}/{} seeds; \
             mAP over lambda {LAMBDAS:?}: [{}]",
            fractions.join(", "),
            self.results.len(),
            curves.join(", ")
        );
        (monotone, interior >= 3, detail)
    }
}
