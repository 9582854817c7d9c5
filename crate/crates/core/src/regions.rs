//! Region proposals, bilateral teacher/student region pairs, the channel
//! adapter and per-location channel normalization.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::detector::{DetOutput, DetValues, REG_CHANNELS};
use crate::error::{Error, Result};
use crate::tensor::{RoiBox, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Teacher,
    Student,
}

/// A heatmap peak decoded into a box, on the detector output grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Proposal {
    pub batch: usize,
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub l: f64,
    /// Peak cell `(row, col)`.
    pub cell: (usize, usize),
    pub class_id: usize,
    pub score: f64,
    pub p_cls: Vec<f64>,
    pub p_reg: [f64; REG_CHANNELS],
    pub source: Source,
}

/// Log-extent clamp applied while decoding, keeps boxes finite and positive.
const LN_EXTENT_RANGE: f64 = 6.0;

/// Cells that are maxima of their 3×3 neighborhood in one class plane
/// (ties count as maxima), as `(score, class, row, col)`.
pub fn local_maxima(cls: &Tensor, batch: usize) -> Vec<(f64, usize, usize, usize)> {
    let [_, k, h, w] = [cls.shape()[0], cls.shape()[1], cls.shape()[2], cls.shape()[3]];
    let mut out = Vec::new();
    for c in 0..k {
        let plane = &cls.data()[(batch * k + c) * h * w..][..h * w];
        for i in 0..h {
            for j in 0..w {
                let v = plane[i * w + j];
                let mut is_max = true;
                'nb: for ni in i.saturating_sub(1)..=(i + 1).min(h - 1) {
                    for nj in j.saturating_sub(1)..=(j + 1).min(w - 1) {
                        if plane[ni * w + nj] > v {
                            is_max = false;
                            break 'nb;
                        }
                    }
                }
                if is_max {
                    out.push((v, c, i, j));
                }
            }
        }
    }
    out
}

/// Top-scoring heatmap peaks of sample `batch`, decoded with the regression
/// map at the peak cell. Ordered by descending score; ties keep
/// class/row/column order.
pub fn extract_proposals(out: &DetValues, batch: usize, top_k: usize, min_score: f64, source: Source) -> Vec<Proposal> {
    let k = out.cls.shape()[1];
    let mut peaks: Vec<_> = local_maxima(&out.cls, batch).into_iter().filter(|p| p.0 >= min_score).collect();
    peaks.sort_by(|a, b| b.0.total_cmp(&a.0));
    peaks.truncate(top_k);
    peaks
        .into_iter()
        .map(|(score, class_id, i, j)| {
            let p_cls = (0..k).map(|c| out.cls.get(&[batch, c, i, j])).collect();
            let mut p_reg = [0.0; REG_CHANNELS];
            for (c, r) in p_reg.iter_mut().enumerate() {
                *r = out.reg.get(&[batch, c, i, j]);
            }
            let ext = |v: f64| v.clamp(-LN_EXTENT_RANGE, LN_EXTENT_RANGE).exp();
            Proposal {
                batch,
                cx: j as f64 + p_reg[0],
                cy: i as f64 + p_reg[1],
                w: ext(p_reg[2]),
                l: ext(p_reg[3]),
                cell: (i, j),
                class_id,
                score,
                p_cls,
                p_reg,
                source,
            }
        })
        .collect()
}

/// Crop geometry of one region pair.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PairSpec {
    pub roi: RoiBox,
    /// Cell where both models' regression vectors are read.
    pub cell: (usize, usize),
    pub origin: Source,
}

/// Margin added on every side of a decoded extent, in cells.
pub const REGION_MARGIN: f64 = 1.0;

/// Bilateral pairing: every teacher proposal and then every student
/// proposal yields one region, cropped from both models at the same place.
/// Duplicated locations are kept.
pub fn pair_regions(teacher: &[Proposal], student: &[Proposal]) -> Vec<PairSpec> {
    teacher
        .iter()
        .chain(student)
        .map(|p| PairSpec {
            roi: RoiBox::new(p.batch, p.cx, p.cy, p.w + 2.0 * REGION_MARGIN, p.l + 2.0 * REGION_MARGIN),
            cell: p.cell,
            origin: p.source,
        })
        .collect()
}

/// How patch activations become distributions before comparison.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormMode {
    /// Softmax over channels at each location.
    Channel,
    /// Softmax over locations within each channel.
    Spatial,
}

pub fn normalize<'t>(x: Var<'t>, tau: f64, mode: NormMode) -> Result<Var<'t>> {
    match mode {
        NormMode::Channel => x.channel_softmax(tau),
        NormMode::Spatial => x.spatial_softmax(tau),
    }
}

/// Per-location channel softmax of a `[C, r, r]` patch.
pub fn normalize_channels(patch: &Tensor, tau: f64) -> Result<Tensor> {
    let tape = Tape::new();
    let x = tape.constant(with_batch_axis(patch)?);
    let y = x.channel_softmax(tau)?.value();
    y.reshape(patch.shape())
}

/// RoI-Align of a `[C, H, W]` map over one box.
pub fn roi_align(feature: &Tensor, cx: f64, cy: f64, w: f64, l: f64, r: usize) -> Result<Tensor> {
    let tape = Tape::new();
    let x = tape.constant(with_batch_axis(feature)?);
    let y = x.roi_align(&[RoiBox::new(0, cx, cy, w, l)], r)?.value();
    y.index_outer(0).reshape(&[feature.shape()[0], r, r])
}

fn with_batch_axis(t: &Tensor) -> Result<Tensor> {
    if t.rank() != 3 {
        return Err(Error::Config(format!("expected a [C, H, W] tensor, got {:?}", t.shape())));
    }
    let mut shape = vec![1];
    shape.extend_from_slice(t.shape());
    t.reshape(&shape)
}

/// Channel adapter: 1×1 convolution, per-channel normalization, ReLU.
#[derive(Clone, Debug, PartialEq)]
pub struct AdapterParams {
    /// `[C_T, C_S, 1, 1]`.
    pub kernel: Tensor,
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub use_norm: bool,
    pub momentum: f64,
    pub eps: f64,
}

impl AdapterParams {
    pub fn init(c_student: usize, c_teacher: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, (2.0 / c_student as f64).sqrt()).expect("finite std");
        let kernel = Tensor::from_fn(&[c_teacher, c_student, 1, 1], |_| normal.sample(&mut rng));
        Self::with_kernel(kernel)
    }

    /// Identity projection for equal channel counts.
    pub fn identity(c: usize) -> Self {
        Self::with_kernel(Tensor::from_fn(&[c, c, 1, 1], |i| if i / c == i % c { 1.0 } else { 0.0 }))
    }

    fn with_kernel(kernel: Tensor) -> Self {
        let c = kernel.shape()[0];
        Self {
            kernel,
            gamma: Tensor::ones(&[c]),
            beta: Tensor::zeros(&[c]),
            running_mean: vec![0.0; c],
            running_var: vec![1.0; c],
            use_norm: true,
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.kernel.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.kernel.shape()[0]
    }

    /// Trainable tensors under `adapter.*` names.
    pub fn tensors(&self) -> BTreeMap<String, Tensor> {
        BTreeMap::from([
            ("adapter.w".to_string(), self.kernel.clone()),
            ("adapter.gamma".to_string(), self.gamma.clone()),
            ("adapter.beta".to_string(), self.beta.clone()),
        ])
    }

    /// Writes updated trainable tensors back (names as in [`Self::tensors`]).
    pub fn load_tensors(&mut self, t: &BTreeMap<String, Tensor>) {
        if let Some(k) = t.get("adapter.w") {
            self.kernel = k.clone();
        }
        if let Some(g) = t.get("adapter.gamma") {
            self.gamma = g.clone();
        }
        if let Some(b) = t.get("adapter.beta") {
            self.beta = b.clone();
        }
    }

    /// Running statistics as tensors, for checkpoints.
    pub fn state_tensors(&self) -> BTreeMap<String, Tensor> {
        let c = self.out_channels();
        let mut t = self.tensors();
        t.insert("adapter.running_mean".into(), Tensor::new(&[c], self.running_mean.clone()).expect("len c"));
        t.insert("adapter.running_var".into(), Tensor::new(&[c], self.running_var.clone()).expect("len c"));
        t
    }

    pub fn from_state_tensors(t: &BTreeMap<String, Tensor>) -> Option<Self> {
        let mut a = Self::with_kernel(t.get("adapter.w")?.clone());
        a.load_tensors(t);
        a.running_mean = t.get("adapter.running_mean")?.data().to_vec();
        a.running_var = t.get("adapter.running_var")?.data().to_vec();
        Some(a)
    }

    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> BoundAdapter<'t> {
        let put = |t: &Tensor| if trainable { tape.leaf(t.clone()) } else { tape.constant(t.clone()) };
        BoundAdapter {
            kernel: put(&self.kernel),
            gamma: put(&self.gamma),
            beta: put(&self.beta),
            in_channels: self.in_channels(),
            use_norm: self.use_norm,
            eps: self.eps,
            running_mean: self.running_mean.clone(),
            running_var: self.running_var.clone(),
        }
    }

    fn update_running(&mut self, mean: &[f64], var: &[f64]) {
        let m = self.momentum;
        for (r, v) in self.running_mean.iter_mut().zip(mean) {
            *r = (1.0 - m) * *r + m * v;
        }
        for (r, v) in self.running_var.iter_mut().zip(var) {
            *r = (1.0 - m) * *r + m * v;
        }
    }
}

pub struct BoundAdapter<'t> {
    pub kernel: Var<'t>,
    pub gamma: Var<'t>,
    pub beta: Var<'t>,
    in_channels: usize,
    use_norm: bool,
    eps: f64,
    running_mean: Vec<f64>,
    running_var: Vec<f64>,
}

/// Batch statistics observed during a training-mode adapter pass.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdapterStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl AdapterStats {
    pub fn apply(&self, params: &mut AdapterParams) {
        if !self.mean.is_empty() {
            params.update_running(&self.mean, &self.var);
        }
    }
}

impl<'t> BoundAdapter<'t> {
    /// Adapts an NCHW stack of student patches. Training mode normalizes
    /// with the stack's own statistics and returns them; eval mode uses the
    /// running statistics.
    pub fn forward(&self, x: Var<'t>, training: bool) -> Result<(Var<'t>, AdapterStats)> {
        let shape = x.shape();
        if shape.len() != 4 || shape[1] != self.in_channels {
            return Err(Error::Config(format!("adapter expects [N, {}, H, W], got {shape:?}", self.in_channels)));
        }
        let y = x.conv2d(self.kernel, 1, 0)?;
        let mut stats = AdapterStats::default();
        let y = if !self.use_norm {
            y
        } else if training {
            let (n, mean, var) = y.batch_norm(self.gamma, self.beta, self.eps)?;
            stats = AdapterStats { mean, var };
            n
        } else {
            y.frozen_norm(self.gamma, self.beta, &self.running_mean, &self.running_var, self.eps)?
        };
        Ok((y.relu(), stats))
    }
}

/// Adapter applied to a single `[C_S, r, r]` patch, eval mode.
pub fn adapt_student(patch: &Tensor, params: &AdapterParams) -> Result<Tensor> {
    let tape = Tape::new();
    let x = tape.constant(with_batch_axis(patch)?);
    let (y, _) = params.bind(&tape, false).forward(x, false)?;
    let c = params.out_channels();
    y.value().reshape(&[c, patch.shape()[1], patch.shape()[2]])
}

/// Region pairs recorded on a tape. Patch tensors are `[P, C_T, r, r]` and
/// already normalized; logits are `[P, K]` and `[P, 6]`. Teacher-side
/// entries are constants.
pub struct PairBatch<'t> {
    pub specs: Vec<PairSpec>,
    pub teacher_patches: Var<'t>,
    pub student_patches: Var<'t>,
    pub teacher_cls: Var<'t>,
    pub student_cls: Var<'t>,
    pub teacher_reg: Var<'t>,
    pub student_reg: Var<'t>,
    pub adapter_stats: AdapterStats,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PairOptions {
    pub roi_res: usize,
    pub tau: f64,
    pub norm: NormMode,
}

/// Crops every pair from both models and pushes the student side through
/// the adapter. With no pairs the patch stacks are empty.
pub fn build_pairs<'t>(
    tape: &'t Tape,
    teacher: &DetValues,
    student: &DetOutput<'t>,
    adapter: &BoundAdapter<'t>,
    specs: Vec<PairSpec>,
    opts: PairOptions,
    training: bool,
) -> Result<PairBatch<'t>> {
    let ts = teacher.neck.shape();
    let ss = student.neck.shape();
    if ts[0] != ss[0] || ts[2..] != ss[2..] {
        return Err(Error::Config(format!("teacher neck {ts:?} and student neck {ss:?} are not aligned")));
    }
    let r = opts.roi_res;
    let ct = ts[1];
    let k = teacher.cls.shape()[1];
    if specs.is_empty() {
        let empty = |shape: &[usize]| tape.constant(Tensor::zeros(shape));
        return Ok(PairBatch {
            specs,
            teacher_patches: empty(&[0, ct, r, r]),
            student_patches: empty(&[0, ct, r, r]),
            teacher_cls: empty(&[0, k]),
            student_cls: empty(&[0, k]),
            teacher_reg: empty(&[0, REG_CHANNELS]),
            student_reg: empty(&[0, REG_CHANNELS]),
            adapter_stats: AdapterStats::default(),
        });
    }
    let boxes: Vec<RoiBox> = specs.iter().map(|s| s.roi).collect();
    let cells: Vec<_> = specs.iter().map(|s| (s.roi.batch, s.cell.0, s.cell.1)).collect();

    let t_neck = tape.constant(teacher.neck.clone());
    let t_patch = normalize(t_neck.roi_align(&boxes, r)?, opts.tau, opts.norm)?;
    let s_raw = student.neck.roi_align(&boxes, r)?;
    let (s_adapted, adapter_stats) = adapter.forward(s_raw, training)?;
    let s_patch = normalize(s_adapted, opts.tau, opts.norm)?;

    let t_cls = tape.constant(teacher.cls.clone()).region_max(&boxes)?;
    let s_cls = student.cls.region_max(&boxes)?;
    let t_reg = tape.constant(teacher.reg.clone()).gather_cells(&cells)?;
    let s_reg = student.reg.gather_cells(&cells)?;
    Ok(PairBatch {
        specs,
        teacher_patches: t_patch,
        student_patches: s_patch,
        teacher_cls: t_cls,
        student_cls: s_cls,
        teacher_reg: t_reg,
        student_reg: s_reg,
        adapter_stats,
    })
}

impl PairBatch<'_> {
    pub fn len(&self) -> usize {
        self.specs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.specs.is_empty()
    }

    /// Detached per-pair values.
    pub fn to_pairs(&self) -> Vec<RegionPair> {
        let (tp, sp) = (self.teacher_patches.value(), self.student_patches.value());
        let (tc, sc) = (self.teacher_cls.value(), self.student_cls.value());
        let (tr, sr) = (self.teacher_reg.value(), self.student_reg.value());
        self.specs
            .iter()
            .enumerate()
            .map(|(i, s)| RegionPair {
                teacher_patch: tp.index_outer(i),
                student_patch: sp.index_outer(i),
                teacher_cls: tc.index_outer(i).into_data(),
                student_cls: sc.index_outer(i).into_data(),
                teacher_reg: tr.index_outer(i).into_data(),
                student_reg: sr.index_outer(i).into_data(),
                origin: s.origin,
            })
            .collect()
    }
}

/// One detached region pair: normalized `[C_T, r, r]` patches and the
/// region's class probabilities and regression vectors from each model.
#[derive(Clone, Debug, PartialEq)]
pub struct RegionPair {
    pub teacher_patch: Tensor,
    pub student_patch: Tensor,
    pub teacher_cls: Vec<f64>,
    pub student_cls: Vec<f64>,
    pub teacher_reg: Vec<f64>,
    pub student_reg: Vec<f64>,
    pub origin: Source,
}
