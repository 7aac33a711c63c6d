//! The continuous geodesic convolution over LRF-aligned patches and its
//! PointNet-style replacement.
//!
//! Layers run batched: `B` patches of `K` members each are stacked into
//! `B*K` rows, per-member descriptions are built row-wise, and the sum over
//! members is a group reduction.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Linear, Mlp, ParamId, Params, Session};
use crate::patch::AlignedPatch;
use crate::tensor::{Tensor, Var};

/// Width each raw channel is expanded to in the first layer.
pub const FIRST_LAYER_EXPANSION: usize = 9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ConvVariant {
    #[default]
    Cc,
    Pn,
}

/// Which patch channels reach the layer. Disabled channels are fed as zeros
/// so shapes do not change.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Channels {
    pub use_coords: bool,
    pub use_normals: bool,
    pub use_geodesic: bool,
    pub propagate_features: bool,
}

impl Default for Channels {
    fn default() -> Self {
        Self {
            use_coords: true,
            use_normals: true,
            use_geodesic: true,
            propagate_features: true,
        }
    }
}

/// Stacked patch records for a batch of centers.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchInputs {
    pub k: usize,
    pub coords: Tensor,
    pub normals: Tensor,
    pub geodesics: Tensor,
    /// Row `b*K + j` holds the vertex index of member `j` of patch `b`.
    pub members: Vec<usize>,
}

impl PatchInputs {
    pub fn from_patches(patches: &[AlignedPatch], channels: Channels) -> Result<Self> {
        let k = patches.first().map_or(0, AlignedPatch::len);
        if k == 0 {
            return Err(Error::invalid("patch batch is empty"));
        }
        let rows = patches.len() * k;
        let mut coords = Vec::with_capacity(rows * 3);
        let mut normals = Vec::with_capacity(rows * 3);
        let mut geodesics = Vec::with_capacity(rows);
        let mut members = Vec::with_capacity(rows);
        for p in patches {
            if p.len() != k {
                return Err(Error::invalid(format!(
                    "patch at vertex {} has {} members, expected {k}",
                    p.center,
                    p.len()
                )));
            }
            for j in 0..k {
                let gate = |on: bool, v: f64| if on { v } else { 0.0 };
                coords.extend(p.coords[j].iter().map(|&v| gate(channels.use_coords, v)));
                normals.extend(p.normals[j].iter().map(|&v| gate(channels.use_normals, v)));
                geodesics.push(gate(channels.use_geodesic, p.geodesics[j]));
                members.push(p.member_indices[j]);
            }
        }
        Ok(Self {
            k,
            coords: Tensor::matrix(rows, 3, coords)?,
            normals: Tensor::matrix(rows, 3, normals)?,
            geodesics: Tensor::matrix(rows, 1, geodesics)?,
            members,
        })
    }

    pub fn batch(&self) -> usize {
        self.members.len() / self.k
    }
}

#[derive(Debug, Clone)]
enum Body {
    Cc {
        expand_v: Linear,
        expand_n: Linear,
        expand_g: Linear,
        weight_mlp: Mlp,
        bias: ParamId,
    },
    Pn {
        shared: Mlp,
        out: Linear,
    },
}

/// One convolution layer mapping `F_in` features per vertex to `F_out`.
#[derive(Debug, Clone)]
pub struct LrfConv {
    pub variant: ConvVariant,
    pub f_in: usize,
    pub f_out: usize,
    /// Divide the member sum by `K`.
    pub mean_aggregate: bool,
    body: Body,
}

impl LrfConv {
    /// `f_in = 0` builds a first layer (no incoming features).
    pub fn new(
        p: &mut Params,
        name: &str,
        variant: ConvVariant,
        f_in: usize,
        f_out: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if f_out == 0 {
            return Err(Error::invalid(format!("{name}: output width must be positive")));
        }
        let body = match variant {
            ConvVariant::Cc => {
                let e = if f_in == 0 { FIRST_LAYER_EXPANSION } else { f_in };
                let d = 3 * e + f_in;
                Body::Cc {
                    expand_v: Linear::new(p, &format!("{name}.expand_v"), 3, e, rng),
                    expand_n: Linear::new(p, &format!("{name}.expand_n"), 3, e, rng),
                    expand_g: Linear::new(p, &format!("{name}.expand_g"), 1, e, rng),
                    weight_mlp: Mlp::new(p, &format!("{name}.weight_mlp"), &[d, d, d, d * f_out], false, rng),
                    bias: p.add(format!("{name}.bias"), Tensor::zeros(&[f_out])),
                }
            }
            ConvVariant::Pn => {
                let h = 2 * f_out;
                Body::Pn {
                    shared: Mlp::new(p, &format!("{name}.shared"), &[7 + f_in, h, h], true, rng),
                    out: Linear::new(p, &format!("{name}.out"), h, f_out, rng),
                }
            }
        };
        Ok(Self {
            variant,
            f_in,
            f_out,
            mean_aggregate: true,
            body,
        })
    }

    /// Width of the per-member description fed to the weight MLP.
    pub fn description_width(&self) -> usize {
        match &self.body {
            Body::Cc { expand_v, .. } => 3 * expand_v.fan_out + self.f_in,
            Body::Pn { .. } => 7 + self.f_in,
        }
    }

    /// The final layer of the weight regressor (CC only).
    pub fn weight_output(&self) -> Option<&Linear> {
        match &self.body {
            Body::Cc { weight_mlp, .. } => Some(weight_mlp.last()),
            Body::Pn { .. } => None,
        }
    }

    /// `features` is the `N x F_in` matrix of all vertices (indexed by
    /// `inputs.members`), absent for a first layer. With
    /// `propagate = false` the feature term is fed as zeros. Returns
    /// `B x F_out`.
    pub fn forward(
        &self,
        s: &mut Session,
        inputs: &PatchInputs,
        features: Option<Var>,
        propagate: bool,
    ) -> Result<Var> {
        let rows = inputs.members.len();
        let f_nb = match (features, self.f_in) {
            (None, 0) => None,
            (Some(f), n) if n > 0 => {
                let w = s.g.shape(f).get(1).copied().unwrap_or(0);
                if w != n {
                    return Err(Error::shape("lrfconv", &[n], s.g.shape(f)));
                }
                Some(if propagate {
                    s.g.gather_rows(f, &inputs.members)?
                } else {
                    s.g.constant(Tensor::zeros(&[rows, n]))
                })
            }
            (None, n) => return Err(Error::shape("lrfconv", &[n], &[0])),
            (Some(f), _) => return Err(Error::shape("lrfconv", &[0], s.g.shape(f))),
        };
        let coords = s.g.constant(inputs.coords.clone());
        let normals = s.g.constant(inputs.normals.clone());
        let geo = s.g.constant(inputs.geodesics.clone());
        let k = inputs.k;
        match &self.body {
            Body::Cc {
                expand_v,
                expand_n,
                expand_g,
                weight_mlp,
                bias,
            } => {
                let mut parts = Vec::with_capacity(4);
                for (lin, x) in [(expand_v, coords), (expand_n, normals), (expand_g, geo)] {
                    let y = lin.forward(s, x)?;
                    parts.push(s.g.relu(y)?);
                }
                parts.extend(f_nb);
                let desc = s.g.concat(&parts, 1)?;
                let w = weight_mlp.forward(s, desc)?;
                let y = s.g.rowwise_matvec(w, desc)?;
                let scale = if self.mean_aggregate { 1.0 / k as f64 } else { 1.0 };
                let pooled = s.g.group_sum(y, k, scale)?;
                s.g.add(pooled, s.var(*bias))
            }
            Body::Pn { shared, out } => {
                let mut parts = vec![coords, normals, geo];
                parts.extend(f_nb);
                let x = s.g.concat(&parts, 1)?;
                let h = shared.forward(s, x)?;
                let pooled = s.g.group_max(h, k)?;
                out.forward(s, pooled)
            }
        }
    }
}

/// Applies `layer` to one patch whose member features (in member order) are
/// `prev`, evaluating with the current parameter values.
pub fn lrfconv_forward(
    patch: &AlignedPatch,
    prev: Option<&Tensor>,
    layer: &LrfConv,
    params: &mut Params,
) -> Result<Vec<f64>> {
    let mut inputs = PatchInputs::from_patches(std::slice::from_ref(patch), Channels::default())?;
    inputs.members = (0..patch.len()).collect();
    if let Some(f) = prev {
        if f.rows() != patch.len() {
            return Err(Error::shape("lrfconv_forward", &[patch.len(), layer.f_in], f.shape()));
        }
    }
    let mut s = params.session(crate::tensor::Mode::Eval, false);
    let fv = prev.map(|t| s.g.constant(t.clone()));
    let out = layer.forward(&mut s, &inputs, fv, true)?;
    Ok(s.g.value(out).data().to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::Vec3;
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_patch(k: usize, rng: &mut ChaCha8Rng) -> AlignedPatch {
        let mut v = |s: f64| Vec3::new(rng.random_range(-s..s), rng.random_range(-s..s), rng.random_range(-s..s));
        let coords: Vec<Vec3> = (0..k).map(|j| if j == 0 { Vec3::zeros() } else { v(1.0) }).collect();
        let normals: Vec<Vec3> = (0..k).map(|_| v(1.0).normalize()).collect();
        let geodesics = coords.iter().map(|c| c.norm() * 1.1).collect();
        AlignedPatch {
            center: 0,
            coords,
            normals,
            geodesics,
            member_indices: (0..k).collect(),
        }
    }

    fn layer(variant: ConvVariant, f_in: usize, f_out: usize, seed: u64) -> (Params, LrfConv) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = Params::new();
        let l = LrfConv::new(&mut p, "c", variant, f_in, f_out, &mut rng).unwrap();
        (p, l)
    }

    fn permuted(p: &AlignedPatch, f: &Tensor, perm: &[usize]) -> (AlignedPatch, Tensor) {
        let q = AlignedPatch {
            center: p.center,
            coords: perm.iter().map(|&i| p.coords[i]).collect(),
            normals: perm.iter().map(|&i| p.normals[i]).collect(),
            geodesics: perm.iter().map(|&i| p.geodesics[i]).collect(),
            member_indices: perm.iter().map(|&i| p.member_indices[i]).collect(),
        };
        let c = f.cols();
        let data = perm.iter().flat_map(|&i| f.row(i).to_vec()).collect();
        (q, Tensor::matrix(perm.len(), c, data).unwrap())
    }

    #[test]
    fn zero_weight_regressor_annihilates() {
        let (mut p, l) = layer(ConvVariant::Cc, 4, 5, 1);
        l.weight_output().unwrap().zero(&mut p);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let patch = random_patch(6, &mut rng);
        let f = Tensor::from_fn(&[6, 4], |i| i as f64 - 3.0);
        let y = lrfconv_forward(&patch, Some(&f), &l, &mut p).unwrap();
        assert_eq!(y, vec![0.0; 5]);
    }

    #[test]
    fn singleton_patch_is_finite_and_deterministic() {
        let (mut p, l) = layer(ConvVariant::Cc, 0, 3, 3);
        let patch = AlignedPatch {
            center: 0,
            coords: vec![Vec3::zeros()],
            normals: vec![Vec3::z()],
            geodesics: vec![0.0],
            member_indices: vec![0],
        };
        let a = lrfconv_forward(&patch, None, &l, &mut p).unwrap();
        let b = lrfconv_forward(&patch, None, &l, &mut p).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn neighbor_order_does_not_matter() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for variant in [ConvVariant::Cc, ConvVariant::Pn] {
            let (mut p, l) = layer(variant, 3, 4, 5);
            let patch = random_patch(6, &mut rng);
            let f = Tensor::from_fn(&[6, 3], |_| rng.random_range(-1.0..1.0));
            let base = lrfconv_forward(&patch, Some(&f), &l, &mut p).unwrap();
            for _ in 0..10 {
                let mut perm: Vec<usize> = (0..6).collect();
                perm.shuffle(&mut rng);
                let (q, g) = permuted(&patch, &f, &perm);
                let y = lrfconv_forward(&q, Some(&g), &l, &mut p).unwrap();
                for (a, b) in base.iter().zip(&y) {
                    assert!((a - b).abs() < 1e-12, "{variant:?}");
                }
            }
        }
    }

    #[test]
    fn pointnet_ignores_duplicates() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (mut p, l) = layer(ConvVariant::Pn, 2, 4, 7);
        let patch = random_patch(4, &mut rng);
        let f = Tensor::from_fn(&[4, 2], |_| rng.random_range(-1.0..1.0));
        let base = lrfconv_forward(&patch, Some(&f), &l, &mut p).unwrap();
        let (dup, g) = permuted(&patch, &f, &[0, 1, 2, 3, 2, 2]);
        let y = lrfconv_forward(&dup, Some(&g), &l, &mut p).unwrap();
        assert!(y.iter().zip(&base).all(|(a, b)| (a - b).abs() < 1e-12));
        // the CC sum does see the duplicates, but stays finite
        let (mut pc, lc) = layer(ConvVariant::Cc, 2, 4, 7);
        let a = lrfconv_forward(&patch, Some(&f), &lc, &mut pc).unwrap();
        let b = lrfconv_forward(&dup, Some(&g), &lc, &mut pc).unwrap();
        assert!(b.iter().all(|v| v.is_finite()));
        assert_ne!(a, b);
    }

    #[test]
    fn pointnet_singleton_pools_to_that_member() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (mut p, l) = layer(ConvVariant::Pn, 0, 3, 9);
        let patch = random_patch(1, &mut rng);
        let (dup, _) = permuted(&patch, &Tensor::zeros(&[1, 0]), &[0, 0, 0]);
        assert_eq!(
            lrfconv_forward(&patch, None, &l, &mut p).unwrap(),
            lrfconv_forward(&dup, None, &l, &mut p).unwrap()
        );
    }

    #[test]
    fn feature_width_mismatch_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let (mut p, l) = layer(ConvVariant::Cc, 3, 2, 11);
        let patch = random_patch(4, &mut rng);
        assert!(lrfconv_forward(&patch, Some(&Tensor::zeros(&[4, 2])), &l, &mut p).is_err());
        assert!(lrfconv_forward(&patch, None, &l, &mut p).is_err());
    }

    #[test]
    fn first_layer_description_is_27_wide() {
        let (_, l) = layer(ConvVariant::Cc, 0, 4, 12);
        assert_eq!(l.description_width(), 27);
        let (_, l) = layer(ConvVariant::Cc, 5, 4, 12);
        assert_eq!(l.description_width(), 20);
    }
}
