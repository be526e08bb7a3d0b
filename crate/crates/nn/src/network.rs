//! 3D U-Net, residual U-Net and the dual-branch residual U-Net.
//!
//! All three share a `levels`-deep encoder with 2×2×2 max pooling and a
//! decoder with stride-2 transposed convolutions and skip concatenation.
//! The dual-branch model adds a second encoder fed with the wide
//! field-of-view global patch; its features are cropped to the local field of
//! view, resampled onto the local grid and concatenated into every decoder
//! level. An FCN-8s style head on the global encoder predicts a coarse
//! segmentation whose softmax is fused before the final classifier.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{NnError, Result};
use crate::graph::{Eager, Graph};
use crate::params::{BnIds, Initializer, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Unet3d,
    Resunet,
    DbResunet,
}

impl Family {
    pub const ALL: [Family; 3] = [Family::Unet3d, Family::Resunet, Family::DbResunet];

    pub fn as_str(self) -> &'static str {
        match self {
            Family::Unet3d => "unet3d",
            Family::Resunet => "resunet",
            Family::DbResunet => "db_resunet",
        }
    }

    /// Frozen level-0 width giving parameter counts of roughly 26M, 5.7M and
    /// 4.5M at four levels. The dual-branch width is half the residual one.
    pub fn default_width(self) -> usize {
        match self {
            Family::Unet3d => UNET3D_WIDTH,
            Family::Resunet => RESUNET_WIDTH,
            Family::DbResunet => RESUNET_WIDTH / 2,
        }
    }
}

pub const UNET3D_WIDTH: usize = 64;
pub const RESUNET_WIDTH: usize = 32;
pub const DEFAULT_LEVELS: usize = 4;
pub const DEFAULT_RATE: usize = 2;
pub const NUM_CLASSES: usize = 8;

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Family {
    type Err = NnError;

    fn from_str(s: &str) -> Result<Self> {
        Family::ALL
            .into_iter()
            .find(|f| f.as_str() == s)
            .ok_or_else(|| NnError::Spec(format!("unknown family '{s}' (expected unet3d, resunet or db_resunet)")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub family: Family,
    pub in_channels: usize,
    pub num_classes: usize,
    pub levels: usize,
    /// Channels at level 0; width doubles per level. For the dual-branch
    /// model this is the width of each branch.
    pub base_width: usize,
    /// In-plane downsampling of the global input; only the dual-branch
    /// model uses it.
    pub rate: usize,
}

impl ModelSpec {
    pub fn new(family: Family, in_channels: usize) -> Self {
        Self {
            family,
            in_channels,
            num_classes: NUM_CLASSES,
            levels: DEFAULT_LEVELS,
            base_width: family.default_width(),
            rate: DEFAULT_RATE,
        }
    }

    pub fn with_width(mut self, w: usize) -> Self {
        self.base_width = w;
        self
    }

    pub fn with_levels(mut self, l: usize) -> Self {
        self.levels = l;
        self
    }

    pub fn with_rate(mut self, r: usize) -> Self {
        self.rate = r;
        self
    }

    pub fn width(&self, level: usize) -> usize {
        self.base_width << level
    }

    pub fn uses_global(&self) -> bool {
        self.family == Family::DbResunet
    }

    /// Patch sides must be divisible by this along every axis.
    pub fn size_multiple(&self) -> usize {
        1 << (self.levels - 1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.num_classes < 2 || self.levels == 0 || self.base_width == 0 {
            return Err(NnError::Spec(format!("degenerate specification {self:?}")));
        }
        if self.levels > 8 {
            return Err(NnError::Spec(format!("{} levels is too deep", self.levels)));
        }
        if !matches!(self.rate, 1 | 2 | 4) {
            return Err(NnError::Spec(format!("rate must be one of 1, 2, 4 (got {})", self.rate)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ConvBn {
    pub w: ParamId,
    pub b: ParamId,
    pub bn: BnIds,
}

#[derive(Debug, Clone, Copy)]
pub struct Conv {
    pub w: ParamId,
    pub b: ParamId,
}

#[derive(Debug, Clone, Copy)]
pub enum Block {
    /// conv-BN-ReLU, conv-BN, plus skip (projected when widths differ), ReLU.
    Residual { c1: ConvBn, c2: ConvBn, proj: Option<Conv> },
    /// conv-BN-ReLU twice.
    Double { c1: ConvBn, c2: ConvBn },
}

struct Builder<'a, T> {
    store: &'a mut ParamStore<T>,
    init: Initializer,
}

impl<T: Scalar> Builder<'_, T> {
    fn conv3_bn(&mut self, name: &str, cin: usize, cout: usize) -> ConvBn {
        ConvBn {
            w: self.store.add(format!("{name}.w"), self.init.he_normal([cout, cin, 3, 3, 3], cin * 27), true),
            b: self.store.add(format!("{name}.b"), Tensor::zeros([cout, 1, 1, 1, 1]), true),
            bn: self.store.add_bn(&format!("{name}.bn"), cout),
        }
    }

    fn conv1(&mut self, name: &str, cin: usize, cout: usize) -> Conv {
        Conv {
            w: self.store.add(format!("{name}.w"), self.init.he_normal([cout, cin, 1, 1, 1], cin), true),
            b: self.store.add(format!("{name}.b"), Tensor::zeros([cout, 1, 1, 1, 1]), true),
        }
    }

    fn up(&mut self, name: &str, cin: usize, cout: usize) -> Conv {
        Conv {
            w: self.store.add(format!("{name}.w"), self.init.he_normal([cin, cout, 2, 2, 2], cin), true),
            b: self.store.add(format!("{name}.b"), Tensor::zeros([cout, 1, 1, 1, 1]), true),
        }
    }

    fn block(&mut self, family: Family, name: &str, cin: usize, cout: usize) -> Block {
        let c1 = self.conv3_bn(&format!("{name}.c1"), cin, cout);
        let c2 = self.conv3_bn(&format!("{name}.c2"), cout, cout);
        match family {
            Family::Unet3d => Block::Double { c1, c2 },
            _ => Block::Residual {
                c1,
                c2,
                proj: (cin != cout).then(|| self.conv1(&format!("{name}.proj"), cin, cout)),
            },
        }
    }

    fn encoder(&mut self, spec: &ModelSpec, name: &str) -> Vec<Block> {
        (0..spec.levels)
            .map(|l| {
                let cin = if l == 0 { spec.in_channels } else { spec.width(l - 1) };
                self.block(spec.family, &format!("{name}.enc{l}"), cin, spec.width(l))
            })
            .collect()
    }
}

impl Block {
    /// Builds a standalone block in `store`.
    pub fn build<T: Scalar>(store: &mut ParamStore<T>, family: Family, cin: usize, cout: usize, seed: u64) -> Block {
        let mut b = Builder {
            store,
            init: Initializer::new(seed),
        };
        b.block(family, "block", cin, cout)
    }

    pub fn forward<T: Scalar, G: Graph<T>>(&self, g: &mut G, x: &G::Var) -> Result<G::Var> {
        let conv_bn = |g: &mut G, x: &G::Var, c: &ConvBn| -> Result<G::Var> {
            let y = g.conv3(x, c.w, c.b)?;
            Ok(g.batch_norm(&y, c.bn))
        };
        match self {
            Block::Residual { c1, c2, proj } => {
                let h = conv_bn(g, x, c1)?;
                let h = g.relu(&h);
                let h = conv_bn(g, &h, c2)?;
                let skip = match proj {
                    Some(p) => g.conv1(x, p.w, p.b)?,
                    None => x.clone(),
                };
                let s = g.add(&h, &skip)?;
                Ok(g.relu(&s))
            }
            Block::Double { c1, c2 } => {
                let h = conv_bn(g, x, c1)?;
                let h = g.relu(&h);
                let h = conv_bn(g, &h, c2)?;
                Ok(g.relu(&h))
            }
        }
    }

    /// Ids of every parameter on the residual path (everything but the skip).
    pub fn residual_path(&self) -> Vec<ParamId> {
        let (c1, c2) = match self {
            Block::Residual { c1, c2, .. } | Block::Double { c1, c2 } => (c1, c2),
        };
        [c1, c2]
            .iter()
            .flat_map(|c| [c.w, c.b, c.bn.gamma, c.bn.beta])
            .collect()
    }
}

#[derive(Debug, Clone)]
pub enum Arch {
    UNet {
        enc: Vec<Block>,
        ups: Vec<Conv>,
        dec: Vec<Block>,
        head: Conv,
    },
    DualBranch {
        local_enc: Vec<Block>,
        global_enc: Vec<Block>,
        bottleneck: Block,
        ups: Vec<Conv>,
        dec: Vec<Block>,
        /// Score convolutions on the deepest `min(3, levels)` global levels,
        /// shallowest first.
        aux: Vec<Conv>,
        head: Conv,
    },
}

/// Main logits plus, for the dual-branch model, auxiliary logits on the
/// global grid.
#[derive(Debug, Clone)]
pub struct Output<V> {
    pub main: V,
    pub aux: Option<V>,
}

#[derive(Debug, Clone)]
pub struct Model<T> {
    pub spec: ModelSpec,
    pub arch: Arch,
    pub params: ParamStore<T>,
}

/// Number of global levels feeding the auxiliary head.
pub fn aux_levels(levels: usize) -> usize {
    levels.min(3)
}

impl<T: Scalar> Model<T> {
    pub fn build(spec: ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut params = ParamStore::new();
        let mut b = Builder {
            store: &mut params,
            init: Initializer::new(seed),
        };
        let l = spec.levels;
        let k = spec.num_classes;
        let ups = |b: &mut Builder<'_, T>, name: &str| -> Vec<Conv> {
            (0..l - 1)
                .map(|i| b.up(&format!("{name}.up{i}"), spec.width(i + 1), spec.width(i)))
                .collect()
        };
        let arch = match spec.family {
            Family::Unet3d | Family::Resunet => {
                let enc = b.encoder(&spec, "main");
                let ups = ups(&mut b, "main");
                let dec = (0..l - 1)
                    .map(|i| b.block(spec.family, &format!("main.dec{i}"), 2 * spec.width(i), spec.width(i)))
                    .collect();
                let head = b.conv1("main.head", spec.width(0), k);
                Arch::UNet { enc, ups, dec, head }
            }
            Family::DbResunet => {
                let local_enc = b.encoder(&spec, "local");
                let global_enc = b.encoder(&spec, "global");
                let top = spec.width(l - 1);
                let bottleneck = b.block(spec.family, "local.fuse", 2 * top, top);
                let ups = ups(&mut b, "local");
                let dec = (0..l - 1)
                    .map(|i| b.block(spec.family, &format!("local.dec{i}"), 3 * spec.width(i), spec.width(i)))
                    .collect();
                let aux = (l - aux_levels(l)..l)
                    .map(|i| b.conv1(&format!("global.score{i}"), spec.width(i), k))
                    .collect();
                let head = b.conv1("local.head", spec.width(0) + k, k);
                Arch::DualBranch {
                    local_enc,
                    global_enc,
                    bottleneck,
                    ups,
                    dec,
                    aux,
                    head,
                }
            }
        };
        Ok(Self { spec, arch, params })
    }

    /// Learnable scalar count.
    pub fn count_parameters(&self) -> usize {
        self.params.count_learnable()
    }

    /// Evaluation-mode forward pass on concrete tensors.
    pub fn predict(&self, local: Tensor<T>, global: Option<Tensor<T>>) -> Result<Output<Tensor<T>>> {
        let mut g = Eager::new(&self.params, false);
        let l = g.input(local);
        let gl = global.map(|t| g.input(t));
        let out = self.arch.forward(&self.spec, &mut g, &l, gl.as_ref())?;
        drop(l);
        Ok(Output {
            main: unwrap_rc(out.main),
            aux: out.aux.map(unwrap_rc),
        })
    }
}

fn unwrap_rc<T: Clone>(v: std::rc::Rc<T>) -> T {
    std::rc::Rc::try_unwrap(v).unwrap_or_else(|rc| (*rc).clone())
}

pub fn count_parameters<T: Scalar>(model: &Model<T>) -> usize {
    model.count_parameters()
}

fn encode<T: Scalar, G: Graph<T>>(g: &mut G, blocks: &[Block], x: &G::Var) -> Result<Vec<G::Var>> {
    let mut feats: Vec<G::Var> = Vec::with_capacity(blocks.len());
    for (l, block) in blocks.iter().enumerate() {
        let h = if l == 0 {
            block.forward(g, x)?
        } else {
            let p = g.maxpool2(&feats[l - 1]);
            block.forward(g, &p)?
        };
        feats.push(h);
    }
    Ok(feats)
}

/// Central in-plane crop covering `1/rate` of each in-plane side, resampled
/// onto `target`.
pub fn fuse_global<T: Scalar, G: Graph<T>>(g: &mut G, x: &G::Var, rate: usize, target: [usize; 3]) -> Result<G::Var> {
    let [_, _, _, h, w] = g.shape(x);
    let (ch, cw) = (h / rate, w / rate);
    if ch == 0 || cw == 0 {
        return Err(NnError::Shape(format!(
            "global feature map {h}×{w} is too small to crop by rate {rate}"
        )));
    }
    let c = if rate == 1 {
        x.clone()
    } else {
        g.crop(x, (h - ch) / 2, (w - cw) / 2, ch, cw)?
    };
    g.resize(&c, target)
}

impl Arch {
    pub fn forward<T: Scalar, G: Graph<T>>(
        &self,
        spec: &ModelSpec,
        g: &mut G,
        local: &G::Var,
        global: Option<&G::Var>,
    ) -> Result<Output<G::Var>> {
        let shape = g.shape(local);
        if shape[1] != spec.in_channels {
            return Err(NnError::ChannelMismatch {
                expected: spec.in_channels,
                found: shape[1],
            });
        }
        let m = spec.size_multiple();
        if shape[2..].iter().any(|&s| s % m != 0) {
            return Err(NnError::Shape(format!(
                "input {:?} is not divisible by {m} along every spatial axis",
                &shape[2..]
            )));
        }
        match self {
            Arch::UNet { enc, ups, dec, head } => {
                let skips = encode(g, enc, local)?;
                let mut d = skips[skips.len() - 1].clone();
                for l in (0..skips.len() - 1).rev() {
                    let u = g.conv_t2(&d, ups[l].w, ups[l].b)?;
                    let c = g.concat(&[u, skips[l].clone()])?;
                    d = dec[l].forward(g, &c)?;
                }
                let main = g.conv1(&d, head.w, head.b)?;
                Ok(Output { main, aux: None })
            }
            Arch::DualBranch {
                local_enc,
                global_enc,
                bottleneck,
                ups,
                dec,
                aux,
                head,
            } => {
                let global = global.ok_or_else(|| NnError::Shape("dual-branch model needs a global input".into()))?;
                let gshape = g.shape(global);
                if gshape != shape {
                    return Err(NnError::Shape(format!(
                        "global input {gshape:?} differs from local input {shape:?}"
                    )));
                }
                let e = encode(g, local_enc, local)?;
                let gf = encode(g, global_enc, global)?;
                let levels = e.len();

                // Auxiliary head: deepest score, then upsample-and-add.
                let first = levels - aux.len();
                let mut a = g.conv1(&gf[levels - 1], aux[aux.len() - 1].w, aux[aux.len() - 1].b)?;
                for l in (first..levels - 1).rev() {
                    let target = g.value(&gf[l]).spatial();
                    let up = g.resize(&a, target)?;
                    let s = g.conv1(&gf[l], aux[l - first].w, aux[l - first].b)?;
                    a = g.add(&up, &s)?;
                }
                let aux_logits = g.resize(&a, [shape[2], shape[3], shape[4]])?;

                let top = levels - 1;
                let target = g.value(&e[top]).spatial();
                let fused = fuse_global(g, &gf[top], spec.rate, target)?;
                let c = g.concat(&[e[top].clone(), fused])?;
                let mut d = bottleneck.forward(g, &c)?;
                for l in (0..top).rev() {
                    let u = g.conv_t2(&d, ups[l].w, ups[l].b)?;
                    let target = g.value(&e[l]).spatial();
                    let fused = fuse_global(g, &gf[l], spec.rate, target)?;
                    let c = g.concat(&[u, e[l].clone(), fused])?;
                    d = dec[l].forward(g, &c)?;
                }
                let probs = g.softmax(&aux_logits);
                let fused = fuse_global(g, &probs, spec.rate, [shape[2], shape[3], shape[4]])?;
                let c = g.concat(&[d, fused])?;
                let main = g.conv1(&c, head.w, head.b)?;
                Ok(Output {
                    main,
                    aux: Some(aux_logits),
                })
            }
        }
    }

    /// Parameter ids belonging to the local branch of a dual-branch model.
    pub fn local_branch_params(&self) -> Vec<ParamId> {
        match self {
            Arch::UNet { .. } => Vec::new(),
            Arch::DualBranch {
                local_enc,
                bottleneck,
                ups,
                dec,
                head,
                ..
            } => {
                let mut ids: Vec<ParamId> = local_enc
                    .iter()
                    .chain(std::iter::once(bottleneck))
                    .chain(dec.iter())
                    .flat_map(block_params)
                    .collect();
                ids.extend(ups.iter().flat_map(|c| [c.w, c.b]));
                ids.extend([head.w, head.b]);
                ids
            }
        }
    }
}

fn block_params(b: &Block) -> Vec<ParamId> {
    let mut ids = b.residual_path();
    if let Block::Residual { proj: Some(p), .. } = b {
        ids.extend([p.w, p.b]);
    }
    ids
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pattern(shape: [usize; 5]) -> Tensor<f32> {
        let n = shape.iter().product::<usize>();
        Tensor::from_vec(shape, (0..n).map(|i| ((i * 37 % 101) as f32) / 50.0 - 1.0).collect())
    }

    #[test]
    fn residual_block_shapes() {
        for (cout, has_proj) in [(4, false), (8, true)] {
            let mut store = ParamStore::<f32>::new();
            let b = Block::build(&mut store, Family::Resunet, 4, cout, 1);
            assert_eq!(matches!(b, Block::Residual { proj: Some(_), .. }), has_proj);
            let mut g = Eager::new(&store, false);
            let x = g.input(pattern([1, 4, 8, 16, 16]));
            let y = b.forward(&mut g, &x).unwrap();
            assert_eq!(y.shape(), [1, cout, 8, 16, 16]);
        }
    }

    #[test]
    fn zeroed_residual_path_is_relu_of_skip() {
        let mut store = ParamStore::<f32>::new();
        let b = Block::build(&mut store, Family::Resunet, 4, 4, 2);
        for id in b.residual_path() {
            store.get_mut(id).data_mut().fill(0.0);
        }
        let x = pattern([1, 4, 4, 6, 6]);
        for training in [false, true] {
            let mut g = Eager::new(&store, training);
            let xv = g.input(x.clone());
            let y = b.forward(&mut g, &xv).unwrap();
            assert_eq!(*y, x.map(|v| v.max(0.0)));
        }
    }

    #[test]
    fn output_shapes_for_all_families() {
        for family in Family::ALL {
            let spec = ModelSpec::new(family, 2).with_width(2).with_levels(3);
            let model = Model::<f32>::build(spec, 3).unwrap();
            let x = pattern([1, 2, 8, 16, 16]);
            let global = spec.uses_global().then(|| x.clone());
            let out = model.predict(x, global).unwrap();
            assert_eq!(out.main.shape(), [1, 8, 8, 16, 16]);
            assert_eq!(out.aux.is_some(), spec.uses_global());
            if let Some(a) = out.aux {
                assert_eq!(a.shape(), [1, 8, 8, 16, 16]);
            }
        }
    }

    #[test]
    fn channel_and_size_checks() {
        let model = Model::<f32>::build(ModelSpec::new(Family::Resunet, 2).with_width(2).with_levels(3), 0).unwrap();
        assert!(matches!(
            model.predict(pattern([1, 1, 8, 16, 16]), None),
            Err(NnError::ChannelMismatch { expected: 2, found: 1 })
        ));
        assert!(model.predict(pattern([1, 2, 6, 16, 16]), None).is_err());
        assert!("unet".parse::<Family>().is_err());
        assert!(ModelSpec::new(Family::DbResunet, 2).with_rate(3).validate().is_err());
    }

    #[test]
    fn eval_forward_is_deterministic() {
        let spec = ModelSpec::new(Family::DbResunet, 2).with_width(2).with_levels(2);
        let model = Model::<f32>::build(spec, 5).unwrap();
        let x = pattern([1, 2, 4, 16, 16]);
        let a = model.predict(x.clone(), Some(x.clone())).unwrap();
        let b = model.predict(x.clone(), Some(x)).unwrap();
        assert_eq!(a.main, b.main);
    }

    #[test]
    fn aux_output_ignores_local_branch() {
        let spec = ModelSpec::new(Family::DbResunet, 1).with_width(2).with_levels(3);
        let mut model = Model::<f32>::build(spec, 7).unwrap();
        let x = pattern([1, 1, 8, 16, 16]);
        let g = x.map(|v| v * 0.5 + 0.1);
        let before = model.predict(x.clone(), Some(g.clone())).unwrap().aux.unwrap();
        for id in model.arch.local_branch_params() {
            model.params.get_mut(id).data_mut().fill(0.0);
        }
        let after = model.predict(x.map(|v| -v), Some(g)).unwrap().aux.unwrap();
        assert_eq!(before, after);
    }

    #[test]
    fn fuse_shapes_and_constants() {
        let store = ParamStore::<f32>::new();
        let mut g = Eager::new(&store, false);
        let x = g.input(Tensor::full([1, 3, 16, 32, 32], 0.25));
        let y = fuse_global(&mut g, &x, 2, [16, 32, 32]).unwrap();
        assert_eq!(y.shape(), [1, 3, 16, 32, 32]);
        assert!(y.data().iter().all(|&v| v == 0.25));
        let same = fuse_global(&mut g, &x, 1, [16, 32, 32]).unwrap();
        assert_eq!(*same, *x);
        let tiny = g.input(Tensor::full([1, 1, 2, 1, 1], 1.0));
        assert!(fuse_global(&mut g, &tiny, 2, [2, 1, 1]).is_err());
    }

    #[test]
    fn rate_two_crop_is_central_half() {
        let store = ParamStore::<f64>::new();
        let mut g = crate::graph::Tape::new(&store, false);
        let data: Vec<f64> = (0..32 * 32).map(|i| i as f64).collect();
        let x = g.input(Tensor::from_vec([1, 1, 1, 32, 32], data));
        let c = g.crop(&x, 8, 8, 16, 16).unwrap();
        assert_eq!(g.value(&c).data()[0], (8 * 32 + 8) as f64);
        assert_eq!(g.shape(&c), [1, 1, 1, 16, 16]);
    }

    #[test]
    fn width_scaling_is_quadratic() {
        let a = Model::<f32>::build(ModelSpec::new(Family::Resunet, 2).with_width(8), 0).unwrap();
        let b = Model::<f32>::build(ModelSpec::new(Family::Resunet, 2).with_width(16), 0).unwrap();
        let conv_weights = |m: &Model<f32>| -> usize {
            m.params
                .entries()
                .iter()
                .filter(|e| e.learnable && e.name.ends_with(".w"))
                .map(|e| e.value.len())
                .sum()
        };
        let ratio = conv_weights(&b) as f64 / conv_weights(&a) as f64;
        assert!((3.9..4.0).contains(&ratio), "{ratio}");
    }
}
