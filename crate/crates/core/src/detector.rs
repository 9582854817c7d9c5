//! A toy center-based BEV detector.
//!
//! Encoder (two 3×3 convs, the second strided) → a second strided stage →
//! two-scale FPN-lite neck (lateral 1×1 convs, nearest upsample, add, 3×3
//! fuse) → class-heatmap and regression heads. All outputs live at half the
//! BEV resolution. Channel counts follow a base plan scaled by per-stage
//! width multipliers, which is how teacher and student variants differ.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, LoadError, Result};
use crate::scene::{render_gt_heatmap, Scene, BEV_CHANNELS};
use crate::tensor::{read_tensor, write_tensor, Tape, Tensor, Var};

/// Regression channels: `(dx, dy, ln w, ln l, sin θ, cos θ)`.
pub const REG_CHANNELS: usize = 6;
/// Spatial downsampling between the BEV grid and every detector output.
pub const OUTPUT_STRIDE: usize = 2;
/// Initial class-logit bias, so the untrained heatmap starts near 0.1.
const CLS_PRIOR_BIAS: f64 = -2.19;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WidthMult {
    pub encoder: f64,
    pub neck: f64,
    pub head: f64,
}

impl WidthMult {
    pub const TEACHER: WidthMult = WidthMult { encoder: 1.0, neck: 1.0, head: 1.0 };
    pub const S: WidthMult = WidthMult { encoder: 0.75, neck: 0.5, head: 0.5 };
    pub const XXS: WidthMult = WidthMult { encoder: 0.5, neck: 0.25, head: 0.25 };

    pub fn uniform(m: f64) -> Self {
        Self { encoder: m, neck: m, head: m }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Teacher,
    S,
    Xxs,
}

impl Preset {
    pub fn width(self) -> WidthMult {
        match self {
            Preset::Teacher => WidthMult::TEACHER,
            Preset::S => WidthMult::S,
            Preset::Xxs => WidthMult::XXS,
        }
    }
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "teacher" => Ok(Preset::Teacher),
            "s" => Ok(Preset::S),
            "xxs" => Ok(Preset::Xxs),
            other => Err(Error::Config(format!("unknown detector preset {other:?} (expected teacher, s, xxs)"))),
        }
    }
}

/// Channel plan at width 1.0.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelPlan {
    pub encoder: usize,
    pub neck: usize,
    pub head: usize,
}

impl Default for ChannelPlan {
    fn default() -> Self {
        Self { encoder: 16, neck: 32, head: 32 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectorArch {
    pub in_channels: usize,
    pub num_classes: usize,
    pub base: ChannelPlan,
    pub width: WidthMult,
}

impl DetectorArch {
    pub fn new(num_classes: usize, width: WidthMult) -> Self {
        Self { in_channels: BEV_CHANNELS, num_classes, base: ChannelPlan::default(), width }
    }

    fn scaled(base: usize, m: f64) -> usize {
        ((base as f64 * m).round() as usize).max(1)
    }

    pub fn encoder_channels(&self) -> usize {
        Self::scaled(self.base.encoder, self.width.encoder)
    }

    pub fn neck_channels(&self) -> usize {
        Self::scaled(self.base.neck, self.width.neck)
    }

    pub fn head_channels(&self) -> usize {
        Self::scaled(self.base.head, self.width.head)
    }

    /// Expected `(name, shape)` of every parameter tensor.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let (e, n, h, k, i) = (
            self.encoder_channels(),
            self.neck_channels(),
            self.head_channels(),
            self.num_classes,
            self.in_channels,
        );
        let conv = |name: &str, out: usize, inp: usize, ks: usize| {
            vec![(format!("{name}.w"), vec![out, inp, ks, ks]), (format!("{name}.b"), vec![out])]
        };
        [
            conv("enc1", e, i, 3),
            conv("enc2", e, e, 3),
            conv("down", e, e, 3),
            conv("lat1", n, e, 1),
            conv("lat2", n, e, 1),
            conv("fuse", n, n, 3),
            conv("cls1", h, n, 3),
            conv("cls2", k, h, 1),
            conv("reg1", h, n, 3),
            conv("reg2", REG_CHANNELS, h, 1),
        ]
        .concat()
    }

    pub fn digest(&self) -> [u8; 32] {
        let json = serde_json::to_string(self).expect("arch serializes");
        Sha256::digest(json.as_bytes()).into()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DetectorParams {
    pub arch: DetectorArch,
    pub tensors: BTreeMap<String, Tensor>,
}

impl DetectorParams {
    /// He-normal kernels, zero biases, class bias at the sparse-prior value.
    pub fn init(arch: DetectorArch, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tensors = BTreeMap::new();
        for (name, shape) in arch.param_shapes() {
            let t = if name.ends_with(".w") {
                let fan_in: usize = shape[1..].iter().product();
                let std = (2.0 / fan_in as f64).sqrt();
                let normal = Normal::new(0.0, std).expect("finite std");
                Tensor::from_fn(&shape, |_| normal.sample(&mut rng))
            } else if name == "cls2.b" {
                Tensor::full(&shape, CLS_PRIOR_BIAS)
            } else {
                Tensor::zeros(&shape)
            };
            tensors.insert(name, t);
        }
        Self { arch, tensors }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, shape) in self.arch.param_shapes() {
            match self.tensors.get(&name) {
                Some(t) if t.shape() == shape.as_slice() => {}
                Some(t) => {
                    return Err(Error::Config(format!("parameter {name} has shape {:?}, expected {shape:?}", t.shape())))
                }
                None => return Err(Error::Config(format!("missing parameter {name}"))),
            }
        }
        Ok(())
    }

    pub fn num_params(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Puts every parameter on `tape`, trainable or frozen.
    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> BoundParams<'t> {
        let vars = self
            .tensors
            .iter()
            .map(|(k, t)| (k.clone(), if trainable { tape.leaf(t.clone()) } else { tape.constant(t.clone()) }))
            .collect();
        BoundParams { arch: self.arch.clone(), vars }
    }

    /// Forward pass without gradient bookkeeping on the parameters.
    pub fn infer(&self, bev: &Tensor) -> Result<DetValues> {
        let tape = Tape::new();
        let bound = self.bind(&tape, false);
        let out = bound.forward(&tape, bev)?;
        Ok(out.values())
    }
}

/// Parameters recorded on a tape.
pub struct BoundParams<'t> {
    pub arch: DetectorArch,
    pub vars: BTreeMap<String, Var<'t>>,
}

/// Detector outputs on a tape, all `[N, ·, H/2, W/2]`.
#[derive(Clone, Copy, Debug)]
pub struct DetOutput<'t> {
    pub neck: Var<'t>,
    /// Class probabilities after the sigmoid.
    pub cls: Var<'t>,
    pub reg: Var<'t>,
}

/// Detached detector outputs.
#[derive(Clone, Debug, PartialEq)]
pub struct DetValues {
    pub neck: Tensor,
    pub cls: Tensor,
    pub reg: Tensor,
}

impl DetOutput<'_> {
    pub fn values(&self) -> DetValues {
        DetValues {
            neck: (*self.neck.value()).clone(),
            cls: (*self.cls.value()).clone(),
            reg: (*self.reg.value()).clone(),
        }
    }
}

impl DetValues {
    /// Sample `i` of a batched output, keeping a leading batch axis of 1.
    pub fn sample(&self, i: usize) -> DetValues {
        let one = |t: &Tensor| {
            let s = t.index_outer(i);
            let mut shape = vec![1];
            shape.extend_from_slice(s.shape());
            s.reshape(&shape).expect("same length")
        };
        DetValues { neck: one(&self.neck), cls: one(&self.cls), reg: one(&self.reg) }
    }
}

impl<'t> BoundParams<'t> {
    fn p(&self, name: &str) -> Var<'t> {
        self.vars[name]
    }

    fn conv(&self, x: Var<'t>, name: &str, stride: usize, pad: usize) -> Result<Var<'t>> {
        x.conv2d(self.p(&format!("{name}.w")), stride, pad)?
            .add_channel_bias(self.p(&format!("{name}.b")))
    }

    /// Runs the network on a `[C, H, W]` grid or an `[N, C, H, W]` batch.
    pub fn forward(&self, tape: &'t Tape, bev: &Tensor) -> Result<DetOutput<'t>> {
        let batched = match bev.rank() {
            3 => {
                let mut shape = vec![1];
                shape.extend_from_slice(bev.shape());
                bev.reshape(&shape)?
            }
            4 => bev.clone(),
            r => return Err(Error::Config(format!("detector input must be rank 3 or 4, got {r}"))),
        };
        let s = batched.shape();
        if s[1] != self.arch.in_channels {
            return Err(Error::Config(format!(
                "detector expects {} input channels, got {}",
                self.arch.in_channels, s[1]
            )));
        }
        if s[2] % 4 != 0 || s[3] % 4 != 0 {
            return Err(Error::Config(format!("BEV grid {}x{} must be divisible by 4", s[2], s[3])));
        }
        let x = tape.constant(batched);
        let e1 = self.conv(x, "enc1", 1, 1)?.relu();
        let e2 = self.conv(e1, "enc2", 2, 1)?.relu();
        let d = self.conv(e2, "down", 2, 1)?.relu();
        let l1 = self.conv(e2, "lat1", 1, 0)?;
        let l2 = self.conv(d, "lat2", 1, 0)?.upsample2x()?;
        let neck = self.conv(l1.add(l2)?, "fuse", 1, 1)?.relu();
        let c1 = self.conv(neck, "cls1", 1, 1)?.relu();
        let cls = self.conv(c1, "cls2", 1, 0)?.sigmoid();
        let r1 = self.conv(neck, "reg1", 1, 1)?.relu();
        let reg = self.conv(r1, "reg2", 1, 0)?;
        Ok(DetOutput { neck, cls, reg })
    }

    /// Gradients of the bound parameters, keyed by name.
    pub fn grads(&self, g: &crate::tensor::Gradients) -> BTreeMap<String, Tensor> {
        self.vars
            .iter()
            .filter_map(|(k, v)| g.get(*v).map(|t| (k.clone(), t.clone())))
            .collect()
    }
}

/// Ground-truth heatmaps `[N, K, h, w]` and regression targets for a batch,
/// on the detector's output grid.
pub struct DetTargets {
    pub heatmap: Tensor,
    /// `(batch, row, col)` of each object's center cell.
    pub cells: Vec<(usize, usize, usize)>,
    /// `[P, 6]` regression targets aligned with `cells`.
    pub reg: Tensor,
}

impl DetTargets {
    pub fn build(scenes: &[&Scene], num_classes: usize, h: usize, w: usize) -> Result<Self> {
        let mut maps = Vec::with_capacity(scenes.len());
        let mut cells = Vec::new();
        let mut reg = Vec::new();
        for (b, s) in scenes.iter().enumerate() {
            let objs: Vec<_> = s.objects.iter().map(|o| o.at_stride(OUTPUT_STRIDE)).collect();
            maps.push(render_gt_heatmap(&objs, num_classes, h, w));
            for o in &objs {
                let i = (o.cy as f64).round().clamp(0.0, (h - 1) as f64) as usize;
                let j = (o.cx as f64).round().clamp(0.0, (w - 1) as f64) as usize;
                cells.push((b, i, j));
                reg.extend_from_slice(&o.regression_target());
            }
        }
        let heatmap = if maps.is_empty() { Tensor::zeros(&[0, num_classes, h, w]) } else { Tensor::stack(&maps)? };
        let n = cells.len();
        Ok(Self { heatmap, cells, reg: Tensor::new(&[n, REG_CHANNELS], reg)? })
    }
}

/// `(L_cls, L_reg)`: focal loss against the rendered Gaussian heatmaps, and
/// L1 on the regression map at object center cells (sum over the six
/// channels, mean over objects; exactly zero without objects).
pub fn detection_loss<'t>(out: &DetOutput<'t>, targets: &DetTargets) -> Result<(Var<'t>, Var<'t>)> {
    let tape = out.cls.tape();
    if out.cls.shape() != targets.heatmap.shape() {
        return Err(Error::Config(format!(
            "heatmap shape {:?} does not match targets {:?}",
            out.cls.shape(),
            targets.heatmap.shape()
        )));
    }
    let l_cls = out.cls.focal_loss(&targets.heatmap)?;
    let l_reg = if targets.cells.is_empty() {
        tape.constant(Tensor::scalar(0.0))
    } else {
        let pred = out.reg.gather_cells(&targets.cells)?;
        let diff = pred.sub(tape.constant(targets.reg.clone()))?;
        diff.l1_norm(&[])?.scale(1.0 / targets.cells.len() as f64)
    };
    Ok((l_cls, l_reg))
}

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"RDDC";

/// Named tensors plus the architecture they belong to.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub arch: DetectorArch,
    pub tensors: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    pub fn from_params(p: &DetectorParams) -> Self {
        Self { arch: p.arch.clone(), tensors: p.tensors.clone() }
    }

    /// Detector parameters (anything outside the architecture's names, such
    /// as adapter tensors, is ignored).
    pub fn params(&self) -> Result<DetectorParams> {
        let tensors = self
            .arch
            .param_shapes()
            .into_iter()
            .map(|(name, _)| {
                self.tensors
                    .get(&name)
                    .cloned()
                    .map(|t| (name.clone(), t))
                    .ok_or_else(|| Error::Config(format!("checkpoint lacks {name}")))
            })
            .collect::<Result<_>>()?;
        let p = DetectorParams { arch: self.arch.clone(), tensors };
        p.validate()?;
        Ok(p)
    }

    /// `"RDDC"`, 32-byte SHA-256 of the architecture JSON, `u32` JSON length,
    /// the JSON, `u32` record count, then per record a `u16` name length,
    /// the UTF-8 name and one tensor record.
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        let json = serde_json::to_vec(&self.arch).expect("arch serializes");
        w.write_all(&CHECKPOINT_MAGIC)?;
        w.write_all(&self.arch.digest())?;
        w.write_all(&(json.len() as u32).to_le_bytes())?;
        w.write_all(&json)?;
        w.write_all(&(self.tensors.len() as u32).to_le_bytes())?;
        for (name, t) in &self.tensors {
            w.write_all(&(name.len() as u16).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            write_tensor(w, t)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        use crate::tensor::read_exact_or;
        let mut magic = [0u8; 4];
        read_exact_or(r, &mut magic, "checkpoint magic")?;
        if magic != CHECKPOINT_MAGIC {
            return Err(LoadError::BadMagic { expected: CHECKPOINT_MAGIC, found: magic }.into());
        }
        let mut digest = [0u8; 32];
        read_exact_or(r, &mut digest, "config digest")?;
        let mut len = [0u8; 4];
        read_exact_or(r, &mut len, "arch length")?;
        let mut json = vec![0u8; u32::from_le_bytes(len) as usize];
        read_exact_or(r, &mut json, "arch description")?;
        let arch: DetectorArch =
            serde_json::from_slice(&json).map_err(|e| LoadError::Malformed(format!("architecture: {e}")))?;
        if arch.digest() != digest {
            return Err(LoadError::DigestMismatch {
                expected: hex_string(&arch.digest()),
                found: hex_string(&digest),
            }
            .into());
        }
        read_exact_or(r, &mut len, "record count")?;
        let mut tensors = BTreeMap::new();
        for _ in 0..u32::from_le_bytes(len) {
            let mut nl = [0u8; 2];
            read_exact_or(r, &mut nl, "record name length")?;
            let mut name = vec![0u8; u16::from_le_bytes(nl) as usize];
            read_exact_or(r, &mut name, "record name")?;
            let name = String::from_utf8(name).map_err(|_| LoadError::Malformed("record name is not UTF-8".into()))?;
            tensors.insert(name, read_tensor(r)?);
        }
        Ok(Self { arch, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(&mut BufReader::new(File::open(path)?))
    }
}

pub(crate) fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{generate_scene, SceneConfig};

    fn tiny_scene_cfg() -> SceneConfig {
        SceneConfig { extent: 12.8, resolution: 0.8, max_objects: 2, max_distractors: 1, ..SceneConfig::default() }
    }

    #[test]
    fn zero_input_gives_finite_outputs() {
        let p = DetectorParams::init(DetectorArch::new(3, WidthMult::TEACHER), 1);
        let out = p.infer(&Tensor::zeros(&[3, 16, 16])).unwrap();
        assert!(out.neck.all_finite() && out.cls.all_finite() && out.reg.all_finite());
        assert_eq!(out.cls.shape(), &[1, 3, 8, 8]);
        assert_eq!(out.reg.shape(), &[1, 6, 8, 8]);
        assert!(out.cls.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn neck_width_follows_multiplier() {
        let a = DetectorArch::new(3, WidthMult::uniform(1.0));
        let b = DetectorArch::new(3, WidthMult::uniform(0.5));
        assert_eq!(a.neck_channels(), 2 * b.neck_channels());
        let out = DetectorParams::init(b, 0).infer(&Tensor::zeros(&[3, 8, 8])).unwrap();
        assert_eq!(out.neck.shape()[1], 16);
    }

    #[test]
    fn wrong_input_channels_rejected() {
        let p = DetectorParams::init(DetectorArch::new(3, WidthMult::XXS), 1);
        assert!(matches!(p.infer(&Tensor::zeros(&[2, 8, 8])), Err(Error::Config(_))));
    }

    #[test]
    fn zero_objects_zero_regression_loss() {
        let cfg = SceneConfig { min_objects: 0, max_objects: 0, ..tiny_scene_cfg() };
        let scene = generate_scene(&cfg, 4).unwrap();
        let p = DetectorParams::init(DetectorArch::new(3, WidthMult::XXS), 1);
        let tape = Tape::new();
        let out = p.bind(&tape, true).forward(&tape, &scene.bev).unwrap();
        let t = DetTargets::build(&[&scene], 3, 8, 8).unwrap();
        let (cls, reg) = detection_loss(&out, &t).unwrap();
        assert_eq!(reg.value().item(), 0.0);
        assert!(cls.value().item() > 0.0);
    }

    #[test]
    fn checkpoint_round_trip() {
        let p = DetectorParams::init(DetectorArch::new(3, WidthMult::S), 9);
        let mut buf = Vec::new();
        Checkpoint::from_params(&p).write_to(&mut buf).unwrap();
        let back = Checkpoint::read_from(&mut &buf[..]).unwrap().params().unwrap();
        assert_eq!(back, p);
        let scene = generate_scene(&tiny_scene_cfg(), 2).unwrap();
        assert_eq!(back.infer(&scene.bev).unwrap(), p.infer(&scene.bev).unwrap());

        let mut bad = buf.clone();
        bad[5] ^= 1;
        assert!(matches!(Checkpoint::read_from(&mut &bad[..]), Err(Error::Load(LoadError::DigestMismatch { .. }))));
        assert!(matches!(
            Checkpoint::read_from(&mut &buf[..buf.len() - 1]),
            Err(Error::Load(LoadError::Truncated(_)))
        ));
    }
}
