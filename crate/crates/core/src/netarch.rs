//! The residual descriptor backbone and the two task heads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::lrf::LrfVariant;
use crate::lrfconv::{Channels, ConvVariant, LrfConv, PatchInputs};
use crate::mesh::TriMesh;
use crate::nn::{BatchNorm, Linear, Params, Session};
use crate::patch::{layer_radius, PatchTable};
use crate::tensor::{Mode, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub k: usize,
    pub scale: f64,
    pub lambda: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    LrfConvBn,
    ResidualBlock,
}

/// A plain conv takes one [`ConvSpec`]; a residual block takes two.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub convs: Vec<ConvSpec>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Ablation {
    pub use_normals: bool,
    pub use_geodesic: bool,
    pub use_lrf: bool,
    pub propagate_features: bool,
    pub use_coords: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Self {
            use_normals: true,
            use_geodesic: true,
            use_lrf: true,
            propagate_features: true,
            use_coords: true,
        }
    }
}

impl Ablation {
    pub fn channels(&self) -> Channels {
        Channels {
            use_coords: self.use_coords,
            use_normals: self.use_normals,
            use_geodesic: self.use_geodesic,
            propagate_features: self.propagate_features,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum HeadSpec {
    /// Residual blocks with the given output widths; the last is the class
    /// count, followed by a softmax.
    Segmentation { widths: Vec<usize> },
    /// `blocks` residual blocks of constant `width`.
    Correspondence { width: usize, blocks: usize },
}

impl HeadSpec {
    pub fn widths(&self) -> Vec<usize> {
        match self {
            HeadSpec::Segmentation { widths } => widths.clone(),
            HeadSpec::Correspondence { width, blocks } => vec![*width; *blocks],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub base_width: usize,
    pub base_radius: f64,
    pub conv_variant: ConvVariant,
    pub lrf_variant: LrfVariant,
    /// Divide each conv's member sum by `K`.
    pub mean_aggregate: bool,
    pub ablation: Ablation,
    pub layers: Vec<LayerSpec>,
    pub head: HeadSpec,
}

pub const SEGMENTATION_CLASSES: usize = 8;

impl ModelSpec {
    /// One conv plus six residual blocks (13 convs), `K = 16`, radius scale
    /// and width multiplier doubling every four convs, segmentation head
    /// 512 down to 8.
    pub fn paper_default() -> Self {
        let sched = [1usize, 1, 1, 1, 2, 2, 2, 2, 4, 4, 4, 4, 8];
        let conv = |i: usize| ConvSpec {
            k: 16,
            scale: sched[i] as f64,
            lambda: sched[i],
        };
        let mut layers = vec![LayerSpec {
            kind: LayerKind::LrfConvBn,
            convs: vec![conv(0)],
        }];
        for b in 0..6 {
            layers.push(LayerSpec {
                kind: LayerKind::ResidualBlock,
                convs: vec![conv(1 + 2 * b), conv(2 + 2 * b)],
            });
        }
        Self {
            base_width: 32,
            base_radius: 0.003,
            conv_variant: ConvVariant::Cc,
            lrf_variant: LrfVariant::Curvature,
            mean_aggregate: true,
            ablation: Ablation::default(),
            layers,
            head: Self::segmentation_head(),
        }
    }

    pub fn segmentation_head() -> HeadSpec {
        HeadSpec::Segmentation {
            widths: vec![512, 256, 128, 64, 32, 16, SEGMENTATION_CLASSES],
        }
    }

    pub fn correspondence_head() -> HeadSpec {
        HeadSpec::Correspondence {
            width: 352,
            blocks: 7,
        }
    }

    /// Small plain-conv stack of constant `width` used by tests and the
    /// gradient suite.
    pub fn toy(width: usize, convs: usize, k: usize, head: HeadSpec) -> Self {
        let layers = (0..convs)
            .map(|i| LayerSpec {
                kind: LayerKind::LrfConvBn,
                convs: vec![ConvSpec {
                    k,
                    scale: (1 + i) as f64,
                    lambda: 1,
                }],
            })
            .collect();
        Self {
            base_width: width,
            base_radius: 0.1,
            conv_variant: ConvVariant::Cc,
            lrf_variant: LrfVariant::Curvature,
            mean_aggregate: true,
            ablation: Ablation::default(),
            layers,
            head,
        }
    }

    pub fn convs(&self) -> impl Iterator<Item = &ConvSpec> {
        self.layers.iter().flat_map(|l| l.convs.iter())
    }

    pub fn conv_count(&self) -> usize {
        self.convs().count()
    }

    /// Descriptor width at the end of the backbone.
    pub fn descriptor_width(&self) -> usize {
        self.convs().last().map_or(0, |c| c.lambda * self.base_width)
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_width == 0 || !(self.base_radius > 0.0) {
            return Err(Error::invalid("base width and base radius must be positive"));
        }
        let first = self
            .layers
            .first()
            .ok_or_else(|| Error::invalid("model has no layers"))?;
        if first.kind != LayerKind::LrfConvBn {
            return Err(Error::invalid("the first layer must be a plain conv"));
        }
        for (i, l) in self.layers.iter().enumerate() {
            let want = match l.kind {
                LayerKind::LrfConvBn => 1,
                LayerKind::ResidualBlock => 2,
            };
            if l.convs.len() != want {
                return Err(Error::invalid(format!(
                    "layer {i}: {:?} needs {want} conv specs, got {}",
                    l.kind,
                    l.convs.len()
                )));
            }
            for c in &l.convs {
                if c.k == 0 || c.lambda == 0 || !(c.scale > 0.0) {
                    return Err(Error::invalid(format!("layer {i}: K, scale and lambda must be positive")));
                }
            }
        }
        let widths = self.head.widths();
        if widths.is_empty() || widths.contains(&0) {
            return Err(Error::invalid("head widths must be positive"));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("model spec serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: Self = toml::from_str(text).map_err(|e| Error::invalid(format!("model spec: {e}")))?;
        spec.validate()?;
        Ok(spec)
    }

    /// SHA-256 of the canonical TOML form.
    pub fn spec_hash(&self) -> [u8; 32] {
        Sha256::digest(self.to_toml().as_bytes()).into()
    }

    /// Distinct `(K, scale)` pairs in first-use order and, per conv, the index
    /// of its pair.
    pub fn patch_keys(&self) -> (Vec<(usize, f64)>, Vec<usize>) {
        let mut keys: Vec<(usize, f64)> = Vec::new();
        let mut per_conv = Vec::new();
        for c in self.convs() {
            let pos = keys
                .iter()
                .position(|&(k, s)| k == c.k && s == c.scale)
                .unwrap_or_else(|| {
                    keys.push((c.k, c.scale));
                    keys.len() - 1
                });
            per_conv.push(pos);
        }
        (keys, per_conv)
    }
}

/// Patch tables of one mesh for every `(K, scale)` the spec uses.
#[derive(Debug, Clone)]
pub struct MeshPatches {
    pub tables: Vec<PatchTable>,
}

impl MeshPatches {
    pub fn build(mesh: &TriMesh, spec: &ModelSpec) -> Result<Self> {
        let area = mesh.surface_area();
        let (keys, _) = spec.patch_keys();
        let tables = keys
            .iter()
            .map(|&(k, scale)| PatchTable::build(mesh, layer_radius(spec.base_radius, scale, area), k, spec.lrf_variant))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { tables })
    }

    /// Vertices whose frames are strict in every table.
    pub fn strict_vertices(&self) -> Vec<bool> {
        let n = self.tables.first().map_or(0, PatchTable::len);
        (0..n)
            .map(|i| self.tables.iter().all(|t| t.lrfs[i].is_strict()))
            .collect()
    }
}

/// Network inputs of one mesh: stacked patches for all vertices per table.
#[derive(Debug, Clone, PartialEq)]
pub struct MeshInputs {
    pub vertex_count: usize,
    pub tables: Vec<PatchInputs>,
    pub per_conv: Vec<usize>,
}

impl MeshInputs {
    pub fn new(mesh: &TriMesh, patches: &MeshPatches, spec: &ModelSpec) -> Result<Self> {
        let (keys, per_conv) = spec.patch_keys();
        if keys.len() != patches.tables.len() {
            return Err(Error::invalid(format!(
                "spec needs {} patch tables, got {}",
                keys.len(),
                patches.tables.len()
            )));
        }
        let channels = spec.ablation.channels();
        let tables = patches
            .tables
            .iter()
            .zip(&keys)
            .map(|(t, &(k, _))| {
                if t.k != k || t.len() != mesh.vertex_count() {
                    return Err(Error::invalid("patch table does not match the spec or mesh"));
                }
                PatchInputs::from_patches(&t.patches(mesh, spec.ablation.use_lrf), channels)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            vertex_count: mesh.vertex_count(),
            tables,
            per_conv,
        })
    }

    /// Convenience: builds patch tables and inputs in one go.
    pub fn from_mesh(mesh: &TriMesh, spec: &ModelSpec) -> Result<Self> {
        Self::new(mesh, &MeshPatches::build(mesh, spec)?, spec)
    }
}

#[derive(Debug, Clone)]
struct ConvUnit {
    conv: LrfConv,
    bn: BatchNorm,
}

#[derive(Debug, Clone)]
enum Stage {
    Plain(ConvUnit),
    Residual {
        a: ConvUnit,
        b: ConvUnit,
        proj: Option<Linear>,
    },
}

#[derive(Debug, Clone)]
struct FcBlock {
    l1: Linear,
    bn1: BatchNorm,
    l2: Linear,
    bn2: BatchNorm,
    proj: Option<Linear>,
    relu_out: bool,
}

/// Layer structure; the weights live in [`Model::params`].
#[derive(Debug, Clone)]
pub struct Arch {
    stages: Vec<Stage>,
    head: Vec<FcBlock>,
    softmax: bool,
    propagate: bool,
}

/// Per-vertex descriptors for a list of centers.
#[derive(Debug, Clone, PartialEq)]
pub struct LsdOutput {
    pub centers: Vec<usize>,
    pub rows: Tensor,
}

impl LsdOutput {
    /// Header line `N width`, then one row of decimal floats per center.
    /// Floats use the shortest representation that reads back exactly.
    pub fn to_text(&self) -> String {
        let (n, w) = (self.rows.rows(), self.rows.cols());
        let mut out = format!("{n} {w}\n");
        for r in 0..n {
            let row: Vec<String> = self.rows.row(r).iter().map(|v| v.to_string()).collect();
            out.push_str(&row.join(" "));
            out.push('\n');
        }
        out
    }

    /// Reads [`Self::to_text`] output back as a matrix.
    pub fn parse_text(text: &str) -> Result<Tensor> {
        let bad = |m: String| Error::invalid(format!("descriptor file: {m}"));
        let mut lines = text.lines();
        let header: Vec<usize> = lines
            .next()
            .ok_or_else(|| bad("empty".into()))?
            .split_whitespace()
            .map(|t| t.parse().map_err(|_| bad(format!("bad header token {t:?}"))))
            .collect::<Result<_>>()?;
        let [n, w] = header[..] else {
            return Err(bad("header must be `N width`".into()));
        };
        let mut data = Vec::with_capacity(n * w);
        for (i, line) in lines.enumerate() {
            let row: Vec<f64> = line
                .split_whitespace()
                .map(|t| t.parse().map_err(|_| bad(format!("row {}: bad value {t:?}", i + 1))))
                .collect::<Result<_>>()?;
            if row.len() != w {
                return Err(bad(format!("row {} has {} values, expected {w}", i + 1, row.len())));
            }
            data.extend(row);
        }
        if data.len() != n * w {
            return Err(bad(format!("{} rows, expected {n}", data.len() / w.max(1))));
        }
        Tensor::matrix(n, w, data)
    }

    /// Binary twin of the text format: `N`, `width` as u64 then row-major
    /// f64, all little-endian.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + 8 * self.rows.len());
        out.extend_from_slice(&(self.rows.rows() as u64).to_le_bytes());
        out.extend_from_slice(&(self.rows.cols() as u64).to_le_bytes());
        for v in self.rows.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct Model {
    pub spec: ModelSpec,
    pub arch: Arch,
    pub params: Params,
}

impl Model {
    pub fn new(spec: ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = Params::new();
        let unit = |p: &mut Params, rng: &mut ChaCha8Rng, name: String, f_in: usize, c: &ConvSpec| -> Result<ConvUnit> {
            let f_out = c.lambda * spec.base_width;
            let mut conv = LrfConv::new(p, &name, spec.conv_variant, f_in, f_out, rng)?;
            conv.mean_aggregate = spec.mean_aggregate;
            Ok(ConvUnit {
                bn: BatchNorm::new(p, &format!("{name}.bn"), f_out),
                conv,
            })
        };
        let mut stages = Vec::new();
        let mut width = 0;
        for (i, l) in spec.layers.iter().enumerate() {
            match l.kind {
                LayerKind::LrfConvBn => {
                    let u = unit(&mut p, &mut rng, format!("backbone.{i}"), width, &l.convs[0])?;
                    width = u.conv.f_out;
                    stages.push(Stage::Plain(u));
                }
                LayerKind::ResidualBlock => {
                    let a = unit(&mut p, &mut rng, format!("backbone.{i}.a"), width, &l.convs[0])?;
                    let b = unit(&mut p, &mut rng, format!("backbone.{i}.b"), a.conv.f_out, &l.convs[1])?;
                    let out = b.conv.f_out;
                    let proj = (out != width).then(|| {
                        Linear::new(&mut p, &format!("backbone.{i}.proj"), width, out, &mut rng)
                    });
                    width = out;
                    stages.push(Stage::Residual { a, b, proj });
                }
            }
        }
        let widths = spec.head.widths();
        let mut head = Vec::new();
        for (i, &w) in widths.iter().enumerate() {
            let name = format!("head.{i}");
            head.push(FcBlock {
                l1: Linear::new(&mut p, &format!("{name}.l1"), width, w, &mut rng),
                bn1: BatchNorm::new(&mut p, &format!("{name}.bn1"), w),
                l2: Linear::new(&mut p, &format!("{name}.l2"), w, w, &mut rng),
                bn2: BatchNorm::new(&mut p, &format!("{name}.bn2"), w),
                proj: (w != width).then(|| Linear::new(&mut p, &format!("{name}.proj"), width, w, &mut rng)),
                relu_out: i + 1 < widths.len(),
            });
            width = w;
        }
        let arch = Arch {
            stages,
            head,
            softmax: matches!(spec.head, HeadSpec::Segmentation { .. }),
            propagate: spec.ablation.propagate_features,
        };
        Ok(Self {
            spec,
            arch,
            params: p,
        })
    }

    /// Backbone descriptors of `centers` in eval mode.
    pub fn descriptors(&mut self, inputs: &MeshInputs, centers: &[usize]) -> Result<LsdOutput> {
        let mut s = self.params.session(Mode::Eval, false);
        let f = self.arch.backbone(&mut s, inputs)?;
        let rows = s.g.gather_rows(f, centers)?;
        Ok(LsdOutput {
            centers: centers.to_vec(),
            rows: s.g.value(rows).clone(),
        })
    }

    /// Head output (class probabilities or matching descriptors) for every
    /// vertex in eval mode.
    pub fn predict(&mut self, inputs: &MeshInputs) -> Result<Tensor> {
        let mut s = self.params.session(Mode::Eval, false);
        let f = self.arch.backbone(&mut s, inputs)?;
        let y = self.arch.head(&mut s, f)?;
        Ok(s.g.value(y).clone())
    }

    /// Zeroes the second batch norm of residual block `layer`, so the block
    /// reduces to its skip path.
    pub fn zero_residual_branch(&mut self, layer: usize) -> Result<()> {
        match self.arch.stages.get(layer) {
            Some(Stage::Residual { b, .. }) => {
                self.params.get_mut(b.bn.gamma).data_mut().fill(0.0);
                self.params.get_mut(b.bn.beta).data_mut().fill(0.0);
                Ok(())
            }
            _ => Err(Error::invalid(format!("layer {layer} is not a residual block"))),
        }
    }
}

impl Arch {
    fn conv_unit(
        &self,
        s: &mut Session,
        u: &ConvUnit,
        inputs: &PatchInputs,
        f: Option<Var>,
        relu: bool,
    ) -> Result<Var> {
        let y = u.conv.forward(s, inputs, f, self.propagate)?;
        let y = s.batchnorm(y, &u.bn)?;
        if relu {
            s.g.relu(y)
        } else {
            Ok(y)
        }
    }

    /// Features of every vertex after the last backbone stage, `N x width`.
    pub fn backbone(&self, s: &mut Session, inputs: &MeshInputs) -> Result<Var> {
        self.backbone_from(s, inputs, 0, None, &mut Vec::new())
    }

    pub fn stage_count(&self) -> usize {
        self.stages.len()
    }

    /// Runs stages `from..` on `f`, the output of stage `from - 1`, and
    /// appends each stage output to `trace`.
    pub fn backbone_from(
        &self,
        s: &mut Session,
        inputs: &MeshInputs,
        from: usize,
        mut f: Option<Var>,
        trace: &mut Vec<Var>,
    ) -> Result<Var> {
        let mut conv: usize = self.stages[..from.min(self.stages.len())]
            .iter()
            .map(|st| match st {
                Stage::Plain(_) => 1,
                Stage::Residual { .. } => 2,
            })
            .sum();
        let next = |c: &mut usize| -> Result<&PatchInputs> {
            let t = inputs
                .per_conv
                .get(*c)
                .and_then(|&t| inputs.tables.get(t))
                .ok_or_else(|| Error::invalid(format!("missing patch inputs for conv {c}")))?;
            *c += 1;
            Ok(t)
        };
        for stage in self.stages.iter().skip(from) {
            let out = match stage {
                Stage::Plain(u) => {
                    let t = next(&mut conv)?;
                    self.conv_unit(s, u, t, f, true)?
                }
                Stage::Residual { a, b, proj } => {
                    let x = f.ok_or_else(|| Error::invalid("residual block without input"))?;
                    let ta = next(&mut conv)?;
                    let h = self.conv_unit(s, a, ta, Some(x), true)?;
                    let tb = next(&mut conv)?;
                    let y = self.conv_unit(s, b, tb, Some(h), false)?;
                    let skip = match proj {
                        Some(p) => p.forward(s, x)?,
                        None => x,
                    };
                    let sum = s.g.add(y, skip)?;
                    s.g.relu(sum)?
                }
            };
            trace.push(out);
            f = Some(out);
        }
        f.ok_or_else(|| Error::invalid("model has no layers"))
    }

    /// Fully connected residual head applied row-wise.
    pub fn head(&self, s: &mut Session, mut x: Var) -> Result<Var> {
        for blk in &self.head {
            let h = blk.l1.forward(s, x)?;
            let h = s.batchnorm(h, &blk.bn1)?;
            let h = s.g.relu(h)?;
            let y = blk.l2.forward(s, h)?;
            let y = s.batchnorm(y, &blk.bn2)?;
            let skip = match &blk.proj {
                Some(p) => p.forward(s, x)?,
                None => x,
            };
            x = s.g.add(y, skip)?;
            if blk.relu_out {
                x = s.g.relu(x)?;
            }
        }
        if self.softmax {
            x = s.g.softmax(x)?;
        }
        Ok(x)
    }
}

/// Mean negative log-probability of the true class.
pub fn segmentation_loss(s: &mut Session, probs: Var, labels: &[usize]) -> Result<Var> {
    s.g.nll_probs(probs, labels)
}

/// Fraction of rows whose argmax equals the label.
pub fn accuracy(probs: &Tensor, labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = labels
        .iter()
        .enumerate()
        .filter(|&(r, &l)| argmax(probs.row(r)) == l)
        .count();
    hits as f64 / labels.len() as f64
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::shapes;

    fn toy_mesh() -> TriMesh {
        shapes::bumpy_sphere(1, 0.05, 3)
            .estimate_normals()
            .estimate_curvature_dirs()
            .unwrap()
    }

    fn seg_toy(width: usize) -> ModelSpec {
        ModelSpec::toy(width, 2, 4, HeadSpec::Segmentation { widths: vec![8, 8] })
    }

    #[test]
    fn paper_default_shape() {
        let s = ModelSpec::paper_default();
        s.validate().unwrap();
        assert_eq!(s.conv_count(), 13);
        assert_eq!(s.descriptor_width(), 256);
        assert_eq!(s.head.widths(), vec![512, 256, 128, 64, 32, 16, 8]);
        let c = ModelSpec::correspondence_head();
        assert_eq!(c.widths(), vec![352; 7]);
    }

    #[test]
    fn toml_round_trip_preserves_hash() {
        let s = ModelSpec::paper_default();
        let back = ModelSpec::from_toml(&s.to_toml()).unwrap();
        assert_eq!(back, s);
        assert_eq!(back.spec_hash(), s.spec_hash());
        let mut t = s.clone();
        t.conv_variant = ConvVariant::Pn;
        assert_ne!(t.spec_hash(), s.spec_hash());
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let mut s = seg_toy(4);
        s.layers[0].kind = LayerKind::ResidualBlock;
        assert!(s.validate().is_err());
        let mut s = seg_toy(4);
        s.layers[1].convs[0].k = 0;
        assert!(s.validate().is_err());
    }

    #[test]
    fn backbone_output_shape_and_finiteness() {
        let mesh = toy_mesh();
        let spec = seg_toy(4);
        let inputs = MeshInputs::from_mesh(&mesh, &spec).unwrap();
        let mut m = Model::new(spec, 1).unwrap();
        let centers: Vec<usize> = (0..mesh.vertex_count()).collect();
        let out = m.descriptors(&inputs, &centers).unwrap();
        assert_eq!(out.rows.shape(), &[42, 4]);
        assert!(out.rows.is_finite());
    }

    #[test]
    fn cc_and_pn_have_matching_shapes() {
        let mesh = toy_mesh();
        let mut spec = ModelSpec::toy(4, 1, 4, HeadSpec::Segmentation { widths: vec![8] });
        spec.layers.push(LayerSpec {
            kind: LayerKind::ResidualBlock,
            convs: vec![
                ConvSpec { k: 4, scale: 1.0, lambda: 1 },
                ConvSpec { k: 4, scale: 2.0, lambda: 2 },
            ],
        });
        let inputs = MeshInputs::from_mesh(&mesh, &spec).unwrap();
        let shapes_of = |v: ConvVariant| {
            let mut s = spec.clone();
            s.conv_variant = v;
            let mut m = Model::new(s, 2).unwrap();
            let d = m.descriptors(&inputs, &[0, 5, 7]).unwrap();
            let p = m.predict(&inputs).unwrap();
            (d.rows.shape().to_vec(), p.shape().to_vec())
        };
        let a = shapes_of(ConvVariant::Cc);
        assert_eq!(a, shapes_of(ConvVariant::Pn));
        assert_eq!(a.0, vec![3, 8]);
    }

    #[test]
    fn zeroed_residual_branch_is_identity() {
        let mesh = toy_mesh();
        let mut spec = ModelSpec::toy(4, 1, 4, HeadSpec::Segmentation { widths: vec![8] });
        let plain = spec.clone();
        spec.layers.push(LayerSpec {
            kind: LayerKind::ResidualBlock,
            convs: vec![ConvSpec { k: 4, scale: 2.0, lambda: 1 }; 2],
        });
        let all: Vec<usize> = (0..mesh.vertex_count()).collect();
        let mut m = Model::new(spec.clone(), 3).unwrap();
        m.zero_residual_branch(1).unwrap();
        let with = m.descriptors(&MeshInputs::from_mesh(&mesh, &spec).unwrap(), &all).unwrap();
        // same seed: the first stage draws identical weights
        let mut p = Model::new(plain.clone(), 3).unwrap();
        let without = p.descriptors(&MeshInputs::from_mesh(&mesh, &plain).unwrap(), &all).unwrap();
        assert_eq!(with.rows, without.rows);
    }

    #[test]
    fn segmentation_head_rows_are_distributions() {
        let mesh = toy_mesh();
        let spec = seg_toy(4);
        let inputs = MeshInputs::from_mesh(&mesh, &spec).unwrap();
        let mut m = Model::new(spec, 4).unwrap();
        let p = m.predict(&inputs).unwrap();
        for r in 0..p.rows() {
            assert!((p.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn segmentation_loss_examples() {
        let mut params = Params::new();
        let mut s = params.session(Mode::Eval, false);
        let uniform = s.g.constant(Tensor::filled(&[5, 8], 0.125));
        let l = segmentation_loss(&mut s, uniform, &[0, 1, 2, 3, 7]).unwrap();
        assert!((s.g.value(l).item() - 8f64.ln()).abs() < 1e-12);
        let onehot = s.g.constant(Tensor::from_fn(&[3, 8], |i| if i % 8 == (i / 8) * 2 { 1.0 } else { 0.0 }));
        let l = segmentation_loss(&mut s, onehot, &[0, 2, 4]).unwrap();
        assert_eq!(s.g.value(l).item(), 0.0);
        assert!(segmentation_loss(&mut s, onehot, &[0, 2, 8]).is_err());
    }

    #[test]
    fn argmax_ties_pick_lowest() {
        assert_eq!(argmax(&[0.2, 0.5, 0.5]), 1);
        assert_eq!(argmax(&[0.125; 8]), 0);
    }
}
