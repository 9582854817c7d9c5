mod common;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rdd::config::Strategy;
use rdd::eval::{map_lite, BevBox, Detection, GroundTruth};
use rdd::harness::{mask_fraction_sweep, pair_scores, run_experiment, train_teacher, Dataset, RunReport};
use rdd::regions::local_maxima;
use rdd::tensor::Tensor;
use rdd::{Error, LoadError};

#[test]
fn local_maxima_match_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for _ in 0..100 {
        let (k, h, w) = (rng.random_range(1..4), rng.random_range(1..7), rng.random_range(1..7));
        // coarse levels make plateaus common
        let cls = Tensor::from_fn(&[2, k, h, w], |_| f64::from(rng.random_range(0..4u8)) / 4.0);
        for b in 0..2 {
            let mut want = Vec::new();
            for c in 0..k {
                for i in 0..h {
                    for j in 0..w {
                        let v = cls.get(&[b, c, i, j]);
                        let mut is_max = true;
                        for di in -1i64..=1 {
                            for dj in -1i64..=1 {
                                let (ni, nj) = (i as i64 + di, j as i64 + dj);
                                if ni >= 0 && nj >= 0 && (ni as usize) < h && (nj as usize) < w {
                                    is_max &= cls.get(&[b, c, ni as usize, nj as usize]) <= v;
                                }
                            }
                        }
                        if is_max {
                            want.push((v, c, i, j));
                        }
                    }
                }
            }
            let mut got = local_maxima(&cls, b);
            let key = |t: &(f64, usize, usize, usize)| (t.1, t.2, t.3);
            got.sort_by_key(key);
            want.sort_by_key(key);
            assert_eq!(got, want);
        }
    }
}

#[test]
fn map_lite_three_predictions_two_objects() {
    let bx = |cx| BevBox { cx, cy: 0.0, w: 2.0, l: 2.0 };
    let gts = [
        GroundTruth { scene: 0, class_id: 0, bbox: bx(0.0) },
        GroundTruth { scene: 0, class_id: 0, bbox: bx(10.0) },
    ];
    let dets = [
        Detection { scene: 0, class_id: 0, score: 0.9, bbox: bx(0.0) },
        Detection { scene: 0, class_id: 0, score: 0.8, bbox: bx(5.0) },
        Detection { scene: 0, class_id: 0, score: 0.7, bbox: bx(10.2) },
    ];
    // ranked hits: yes, no, yes. Recall 1/2 at precision 1, recall 1 at 2/3.
    // Levels 1/40..20/40 take precision 1, levels 21/40..1 take 2/3.
    let want = (20.0 * 1.0 + 20.0 * (2.0 / 3.0)) / 40.0;
    let rep = map_lite(&dets, &gts, 2, 0.5);
    assert!((rep.per_class[0].unwrap() - want).abs() < 1e-12);
    assert_eq!(rep.per_class[1], None);
    assert!((rep.map - want).abs() < 1e-12);

    // a detection in another scene never matches
    let elsewhere = [Detection { scene: 1, ..dets[0] }];
    assert_eq!(map_lite(&elsewhere, &gts, 1, 0.5).map, 0.0);
}

fn tiny_setup() -> (rdd::config::ExperimentConfig, Dataset, rdd::detector::DetectorParams) {
    let cfg = common::tiny_config();
    let data = Dataset::generate(&cfg).unwrap();
    let (teacher, _) = train_teacher(&cfg, &data).unwrap();
    (cfg, data, teacher)
}

#[test]
fn strategies_behave_as_configured() {
    let (cfg, data, teacher) = tiny_setup();
    let run = |s: Strategy, lambda: f64| {
        let mut c = cfg.clone();
        c.distill.strategy = s;
        c.distill.params.lambda = lambda;
        run_experiment(&c, &data, Some(&teacher)).unwrap().report
    };

    let none = run(Strategy::None, 0.1);
    assert!(none.mask_fraction_steps.iter().all(|&f| f == 0.0));
    assert!(none.epochs.iter().all(|e| e.l_feat == 0.0 && e.l_logit == 0.0));

    let equal = run(Strategy::Equal, 0.1);
    assert!(equal.mask_fraction_steps.iter().all(|&f| f == 1.0));
    assert!(equal.epochs.iter().any(|e| e.l_feat > 0.0));

    // a huge penalty selects nothing, which leaves plain detection training
    let off = run(Strategy::Rdd, 1e9);
    assert!(off.mask_fraction_steps.iter().all(|&f| f == 0.0));
    assert_eq!(off.epochs, none.epochs);
    assert_eq!(off.final_ap, none.final_ap);

    let hint = run(Strategy::Hint, 0.1);
    assert!(hint.epochs.iter().all(|e| e.l_logit == 0.0));
    assert!(hint.epochs.iter().any(|e| e.l_feat > 0.0));
}

#[test]
fn mask_fraction_shrinks_with_lambda() {
    let (cfg, data, teacher) = tiny_setup();
    let out = run_experiment(&cfg, &data, Some(&teacher)).unwrap();
    let scores = pair_scores(&cfg, &teacher, &out.student, &out.adapter, &data.train.scenes).unwrap();
    assert!(!scores.is_empty());
    let lambdas = [0.0, 0.05, 0.1, 0.5, 1.0, 10.0, 1e9];
    let fr = mask_fraction_sweep(&scores, &lambdas);
    assert!(fr.windows(2).all(|w| w[1] <= w[0]), "{fr:?}");
    assert_eq!(*fr.last().unwrap(), 0.0);
}

#[test]
fn teacher_below_floor_is_a_training_error() {
    let mut cfg = common::tiny_config();
    cfg.train.teacher_epochs = 1;
    cfg.train.teacher_min_map = 1.0;
    let data = Dataset::generate(&cfg).unwrap();
    match train_teacher(&cfg, &data) {
        Err(Error::Training { seed, .. }) => assert_eq!(seed, cfg.train.seed),
        other => panic!("expected a training error, got {other:?}"),
    }
}

#[test]
fn missing_teacher_is_rejected() {
    let mut cfg = common::tiny_config();
    cfg.distill.strategy = Strategy::Rdd;
    let data = Dataset::generate(&cfg).unwrap();
    assert!(matches!(run_experiment(&cfg, &data, None), Err(Error::Config(_))));
}

#[test]
fn report_round_trip_and_digest_check() {
    let mut cfg = common::tiny_config();
    cfg.distill.strategy = Strategy::None;
    cfg.train.epochs = 1;
    let data = Dataset::generate(&cfg).unwrap();
    let report = run_experiment(&cfg, &data, None).unwrap().report;
    let dir = tempfile::tempdir().unwrap();
    report.save(dir.path(), "r").unwrap();
    let csv = std::fs::read_to_string(dir.path().join("r.csv")).unwrap();
    assert!(csv.starts_with("epoch,L_cls,L_reg,L_feat,L_logit,total,mask_fraction,eval_mAP\n"));
    assert_eq!(csv.lines().count(), 2);
    let json = dir.path().join("r.json");
    assert_eq!(RunReport::load(&json).unwrap(), report);

    let tampered = std::fs::read_to_string(&json).unwrap().replace("\"epochs\": 1", "\"epochs\": 2");
    std::fs::write(&json, tampered).unwrap();
    assert!(matches!(RunReport::load(&json), Err(Error::Load(LoadError::DigestMismatch { .. }))));
}
