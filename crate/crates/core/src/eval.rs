//! mAP-lite evaluation and teacher/student patch-distance histograms.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::detector::{DetValues, DetectorParams, OUTPUT_STRIDE};
use crate::error::Result;
use crate::regions::{extract_proposals, pair_regions, Source};
use crate::scene::Scene;
use crate::tensor::{Tape, Tensor};

/// Axis-aligned box `(cx, cy, w, l)` on some grid.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BevBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub l: f64,
}

impl BevBox {
    pub fn iou(&self, o: &BevBox) -> f64 {
        let ix = ((self.cx + self.w / 2.0).min(o.cx + o.w / 2.0) - (self.cx - self.w / 2.0).max(o.cx - o.w / 2.0)).max(0.0);
        let iy = ((self.cy + self.l / 2.0).min(o.cy + o.l / 2.0) - (self.cy - self.l / 2.0).max(o.cy - o.l / 2.0)).max(0.0);
        let inter = ix * iy;
        let union = self.w * self.l + o.w * o.l - inter;
        if union > 0.0 {
            inter / union
        } else {
            0.0
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Detection {
    pub scene: usize,
    pub class_id: usize,
    pub score: f64,
    pub bbox: BevBox,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GroundTruth {
    pub scene: usize,
    pub class_id: usize,
    pub bbox: BevBox,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ApReport {
    /// `None` for classes without ground truth.
    pub per_class: Vec<Option<f64>>,
    /// Mean over classes that have ground truth; 0 when none do.
    pub map: f64,
}

/// Recall levels of the interpolated AP.
pub const AP_POINTS: usize = 40;

/// 40-point interpolated AP from a ranked list of hit/miss flags.
pub fn interpolated_ap(hits: &[bool], num_gt: usize) -> f64 {
    if num_gt == 0 {
        return 0.0;
    }
    let mut curve = Vec::with_capacity(hits.len());
    let mut tp = 0usize;
    for (n, &hit) in hits.iter().enumerate() {
        tp += hit as usize;
        curve.push((tp as f64 / num_gt as f64, tp as f64 / (n + 1) as f64));
    }
    (1..=AP_POINTS)
        .map(|k| {
            let r = k as f64 / AP_POINTS as f64;
            curve.iter().filter(|(rec, _)| *rec >= r - 1e-12).map(|&(_, p)| p).fold(0.0, f64::max)
        })
        .sum::<f64>()
        / AP_POINTS as f64
}

/// Greedy per-class matching by descending score: each detection takes the
/// unmatched ground truth of its scene with the highest IoU, if that IoU
/// reaches `iou_thresh`.
pub fn map_lite(dets: &[Detection], gts: &[GroundTruth], num_classes: usize, iou_thresh: f64) -> ApReport {
    let per_class: Vec<Option<f64>> = (0..num_classes)
        .map(|c| {
            let class_gt: Vec<&GroundTruth> = gts.iter().filter(|g| g.class_id == c).collect();
            if class_gt.is_empty() {
                return None;
            }
            let mut class_dets: Vec<&Detection> = dets.iter().filter(|d| d.class_id == c).collect();
            class_dets.sort_by(|a, b| b.score.total_cmp(&a.score));
            let mut used = vec![false; class_gt.len()];
            let hits: Vec<bool> = class_dets
                .iter()
                .map(|d| {
                    let best = class_gt
                        .iter()
                        .enumerate()
                        .filter(|(g, gt)| !used[*g] && gt.scene == d.scene)
                        .map(|(g, gt)| (g, d.bbox.iou(&gt.bbox)))
                        .fold(None::<(usize, f64)>, |acc, x| match acc {
                            Some(a) if a.1 >= x.1 => Some(a),
                            _ => Some(x),
                        });
                    match best {
                        Some((g, iou)) if iou >= iou_thresh => {
                            used[g] = true;
                            true
                        }
                        _ => false,
                    }
                })
                .collect();
            Some(interpolated_ap(&hits, class_gt.len()))
        })
        .collect();
    let valid: Vec<f64> = per_class.iter().flatten().copied().collect();
    let map = if valid.is_empty() { 0.0 } else { valid.iter().sum::<f64>() / valid.len() as f64 };
    ApReport { per_class, map }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalOptions {
    pub iou_thresh: f64,
    pub top_k: usize,
    pub min_score: f64,
}

/// Decodes detections for every scene and scores them against the
/// ground truth, both on the detector output grid.
pub fn evaluate_map_lite(params: &DetectorParams, scenes: &[Scene], opts: EvalOptions) -> Result<ApReport> {
    let mut dets = Vec::new();
    let mut gts = Vec::new();
    for (s, scene) in scenes.iter().enumerate() {
        let out = params.infer(&scene.bev)?;
        for p in extract_proposals(&out, 0, opts.top_k, opts.min_score, Source::Student) {
            dets.push(Detection {
                scene: s,
                class_id: p.class_id,
                score: p.score,
                bbox: BevBox { cx: p.cx, cy: p.cy, w: p.w, l: p.l },
            });
        }
        for o in &scene.objects {
            let o = o.at_stride(OUTPUT_STRIDE);
            gts.push(GroundTruth {
                scene: s,
                class_id: o.class_id as usize,
                bbox: BevBox { cx: o.cx as f64, cy: o.cy as f64, w: o.w as f64, l: o.l as f64 },
            });
        }
    }
    Ok(map_lite(&dets, &gts, params.arch.num_classes, opts.iou_thresh))
}

/// Equal-width buckets over `[0, range]`, described by their upper edges.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub upper_edges: Vec<f64>,
    pub counts: Vec<usize>,
}

/// Ranges below this collapse every value into the first bucket.
pub const MIN_HIST_RANGE: f64 = 1e-10;

impl Histogram {
    pub fn build(values: &[f64], bins: usize, range: f64) -> Self {
        let bins = bins.max(1);
        let mut counts = vec![0; bins];
        let degenerate = !(range >= MIN_HIST_RANGE);
        for &v in values {
            let b = if degenerate { 0 } else { ((v / range * bins as f64).floor().max(0.0) as usize).min(bins - 1) };
            counts[b] += 1;
        }
        let step = if degenerate { 0.0 } else { range / bins as f64 };
        Self { upper_edges: (1..=bins).map(|b| step * b as f64).collect(), counts }
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    /// Mean count over the upper half of the buckets.
    pub fn upper_half_mean(&self) -> f64 {
        let upper = &self.counts[self.counts.len() / 2..];
        upper.iter().sum::<usize>() as f64 / upper.len().max(1) as f64
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("bucket_upper_edge,count\n");
        for (e, c) in self.upper_edges.iter().zip(&self.counts) {
            s.push_str(&format!("{e},{c}\n"));
        }
        s
    }
}

/// Two histograms over the shared range `[0, max(a ∪ b)]`.
pub fn shared_histograms(a: &[f64], b: &[f64], bins: usize) -> (Histogram, Histogram) {
    let range = a.iter().chain(b).copied().fold(0.0, f64::max);
    (Histogram::build(a, bins, range), Histogram::build(b, bins, range))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DistanceOptions {
    pub top_k: usize,
    pub min_score: f64,
    pub roi_res: usize,
    pub tau: f64,
}

/// Per-region mean-square distance between normalized teacher and student
/// neck patches at the teacher's proposals. Student channels are mapped to
/// teacher channels by an affine least-squares fit over all neck
/// locations of `scenes`, so students of any width are compared the same
/// way.
pub fn pair_distances(
    teacher: &DetectorParams,
    student: &DetectorParams,
    scenes: &[Scene],
    opts: DistanceOptions,
) -> Result<Vec<f64>> {
    if scenes.is_empty() {
        return Ok(Vec::new());
    }
    let mut t_out = Vec::with_capacity(scenes.len());
    let mut s_out = Vec::with_capacity(scenes.len());
    for sc in scenes {
        t_out.push(teacher.infer(&sc.bev)?);
        s_out.push(student.infer(&sc.bev)?);
    }
    let map = fit_channel_map(&s_out, &t_out);

    let mut dists = Vec::new();
    for (t, s) in t_out.iter().zip(&s_out) {
        let props = extract_proposals(t, 0, opts.top_k, opts.min_score, Source::Teacher);
        let specs = pair_regions(&props, &[]);
        if specs.is_empty() {
            continue;
        }
        let boxes: Vec<_> = specs.iter().map(|p| p.roi).collect();
        let tape = Tape::new();
        let tp = tape.constant(t.neck.clone()).roi_align(&boxes, opts.roi_res)?.channel_softmax(opts.tau)?;
        let sp = tape.constant(apply_channel_map(&map, &s.neck)).roi_align(&boxes, opts.roi_res)?.channel_softmax(opts.tau)?;
        let (tv, sv) = (tp.value(), sp.value());
        let per = tv.len() / boxes.len();
        for (a, b) in tv.data().chunks(per).zip(sv.data().chunks(per)) {
            dists.push(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / per as f64);
        }
    }
    Ok(dists)
}

/// `[C_S + 1, C_T]` affine map minimizing squared error from student to
/// teacher channel vectors (lightly ridge-regularized).
fn fit_channel_map(student: &[DetValues], teacher: &[DetValues]) -> DMatrix<f64> {
    let cs = student[0].neck.shape()[1];
    let ct = teacher[0].neck.shape()[1];
    let mut xtx = DMatrix::<f64>::zeros(cs + 1, cs + 1);
    let mut xty = DMatrix::<f64>::zeros(cs + 1, ct);
    let mut x = vec![0.0; cs + 1];
    for (s, t) in student.iter().zip(teacher) {
        let hw = s.neck.shape()[2] * s.neck.shape()[3];
        for loc in 0..hw {
            for c in 0..cs {
                x[c] = s.neck.data()[c * hw + loc];
            }
            x[cs] = 1.0;
            for a in 0..=cs {
                for b in 0..=cs {
                    xtx[(a, b)] += x[a] * x[b];
                }
                for b in 0..ct {
                    xty[(a, b)] += x[a] * t.neck.data()[b * hw + loc];
                }
            }
        }
    }
    let ridge = 1e-9 * (xtx.trace() / (cs + 1) as f64).max(1e-12);
    for d in 0..=cs {
        xtx[(d, d)] += ridge;
    }
    xtx.cholesky().map(|ch| ch.solve(&xty)).unwrap_or_else(|| DMatrix::zeros(cs + 1, ct))
}

fn apply_channel_map(map: &DMatrix<f64>, neck: &Tensor) -> Tensor {
    let cs = map.nrows() - 1;
    let ct = map.ncols();
    let (h, w) = (neck.shape()[2], neck.shape()[3]);
    let hw = h * w;
    let src = neck.data();
    let mut out = Tensor::zeros(&[1, ct, h, w]);
    let dst = out.data_mut();
    for o in 0..ct {
        for loc in 0..hw {
            let mut acc = map[(cs, o)];
            for c in 0..cs {
                acc += map[(c, o)] * src[c * hw + loc];
            }
            dst[o * hw + loc] = acc;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bx(cx: f64, cy: f64, w: f64, l: f64) -> BevBox {
        BevBox { cx, cy, w, l }
    }

    #[test]
    fn iou_examples() {
        assert_eq!(bx(0.0, 0.0, 2.0, 2.0).iou(&bx(0.0, 0.0, 2.0, 2.0)), 1.0);
        assert_eq!(bx(0.0, 0.0, 2.0, 2.0).iou(&bx(5.0, 0.0, 2.0, 2.0)), 0.0);
        assert!((bx(0.0, 0.0, 2.0, 2.0).iou(&bx(1.0, 0.0, 2.0, 2.0)) - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn perfect_and_empty_predictions() {
        let gts = vec![
            GroundTruth { scene: 0, class_id: 0, bbox: bx(3.0, 3.0, 2.0, 4.0) },
            GroundTruth { scene: 1, class_id: 1, bbox: bx(5.0, 1.0, 1.0, 1.0) },
        ];
        let dets: Vec<Detection> =
            gts.iter().map(|g| Detection { scene: g.scene, class_id: g.class_id, score: 1.0, bbox: g.bbox }).collect();
        let r = map_lite(&dets, &gts, 3, 0.5);
        assert_eq!(r.map, 1.0);
        assert_eq!(r.per_class, vec![Some(1.0), Some(1.0), None]);
        assert_eq!(map_lite(&[], &gts, 3, 0.5).map, 0.0);
    }

    #[test]
    fn histogram_conserves_and_handles_zero_range() {
        let h = Histogram::build(&[0.0, 0.5, 1.0, 0.99], 4, 1.0);
        assert_eq!(h.counts, vec![1, 0, 1, 2]);
        assert_eq!(h.upper_edges, vec![0.25, 0.5, 0.75, 1.0]);
        let z = Histogram::build(&[0.0, 1e-20], 5, 1e-20);
        assert_eq!(z.counts, vec![2, 0, 0, 0, 0]);
        assert_eq!(Histogram::build(&[], 3, 0.0).total(), 0);
    }
}
