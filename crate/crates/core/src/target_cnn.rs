//! The generated CNN: `num_blocks` blocks of conv3x3 -> batch norm -> ReLU
//! -> 2x2 max pool, then one dense layer producing the embedding.
//!
//! The network has no weights of its own. Every evaluation takes a
//! [`WeightBundle`] (or graph-bound [`WeightVars`]) from outside.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::episodes::ImageShape;
use crate::error::{invalid, Error, Result};
use crate::serialize;
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Arch {
    pub num_blocks: usize,
    pub channels: usize,
    pub embed_dim: usize,
    pub input: ImageShape,
    #[serde(default = "default_true")]
    pub dense_bias: bool,
}

fn default_true() -> bool {
    true
}

impl Arch {
    pub fn new(num_blocks: usize, channels: usize, embed_dim: usize, input: ImageShape) -> Self {
        Self {
            num_blocks,
            channels,
            embed_dim,
            input,
            dense_bias: true,
        }
    }

    /// The small Omniglot configuration: 8 filters, 20-dim dense output.
    pub fn omniglot() -> Self {
        Self::new(4, 8, 20, ImageShape::new(28, 28, 1))
    }

    /// The tieredImageNet configuration: 64 filters, 40-dim dense output.
    pub fn tiered_imagenet() -> Self {
        Self::new(4, 64, 40, ImageShape::new(84, 84, 3))
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_blocks == 0 || self.channels == 0 || self.embed_dim == 0 || self.input.is_empty() {
            return Err(invalid(format!("architecture has a zero dimension: {self:?}")));
        }
        let (mut h, mut w) = (self.input.height, self.input.width);
        for b in 0..self.num_blocks {
            if h < 2 || w < 2 {
                return Err(invalid(format!(
                    "block {b} receives {h}x{w} activations and cannot pool; reduce num_blocks"
                )));
            }
            h /= 2;
            w /= 2;
        }
        Ok(())
    }

    /// Spatial size after `blocks` blocks.
    pub fn spatial_after(&self, blocks: usize) -> (usize, usize) {
        let (mut h, mut w) = (self.input.height, self.input.width);
        for _ in 0..blocks {
            h /= 2;
            w /= 2;
        }
        (h, w)
    }

    pub fn block_in_channels(&self, block: usize) -> usize {
        if block == 0 {
            self.input.channels
        } else {
            self.channels
        }
    }

    /// Length of the flattened final activation fed to the dense layer.
    pub fn flat_dim(&self) -> usize {
        let (h, w) = self.spatial_after(self.num_blocks);
        h * w * self.channels
    }

    /// Number of generated layers: every block plus the dense layer.
    pub fn num_layers(&self) -> usize {
        self.num_blocks + 1
    }
}

/// Ordered `(name, shape)` list of every weight tensor.
pub fn shape_table(arch: &Arch) -> Result<Vec<(String, Vec<usize>)>> {
    arch.validate()?;
    let mut out = Vec::new();
    for b in 0..arch.num_blocks {
        let ci = arch.block_in_channels(b);
        out.push((format!("block{b}.kernel"), vec![3, 3, ci, arch.channels]));
        out.push((format!("block{b}.bn_scale"), vec![arch.channels]));
        out.push((format!("block{b}.bn_offset"), vec![arch.channels]));
    }
    out.push(("dense.w".into(), vec![arch.flat_dim(), arch.embed_dim]));
    if arch.dense_bias {
        out.push(("dense.b".into(), vec![arch.embed_dim]));
    }
    Ok(out)
}

pub fn param_count(arch: &Arch) -> Result<usize> {
    Ok(shape_table(arch)?
        .iter()
        .map(|(_, s)| s.iter().product::<usize>())
        .sum())
}

/// Concrete target-CNN weights, tensors in [`shape_table`] order.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightBundle {
    pub arch: Arch,
    pub tensors: Vec<Tensor>,
}

/// Every weight tensor set to zero.
pub fn zero_weights(arch: &Arch) -> Result<WeightBundle> {
    let tensors = shape_table(arch)?.iter().map(|(_, s)| Tensor::zeros(s)).collect();
    Ok(WeightBundle {
        arch: arch.clone(),
        tensors,
    })
}

impl WeightBundle {
    pub fn new(arch: Arch, tensors: Vec<Tensor>) -> Result<Self> {
        let b = Self { arch, tensors };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        let table = shape_table(&self.arch)?;
        if table.len() != self.tensors.len() {
            return Err(Error::Shape(format!(
                "bundle has {} tensors, architecture needs {}",
                self.tensors.len(),
                table.len()
            )));
        }
        for ((name, shape), t) in table.iter().zip(&self.tensors) {
            if t.shape() != shape.as_slice() {
                return Err(Error::Shape(format!("{name}: got {:?}, expected {shape:?}", t.shape())));
            }
            if !t.all_finite() {
                return Err(Error::NonFinite(format!("weight tensor {name}")));
            }
        }
        Ok(())
    }

    pub fn abs_sum(&self) -> f64 {
        self.tensors.iter().flat_map(|t| t.data()).map(|v| v.abs()).sum()
    }

    /// Places every tensor on the graph, as parameters or constants.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> WeightVars {
        let vars: Vec<Var> = self
            .tensors
            .iter()
            .map(|t| {
                if trainable {
                    g.param(t.clone())
                } else {
                    g.constant(t.clone())
                }
            })
            .collect();
        WeightVars::from_flat(&self.arch, &vars)
    }

    pub fn named(&self) -> Result<Vec<(String, &Tensor)>> {
        Ok(shape_table(&self.arch)?
            .into_iter()
            .map(|(n, _)| n)
            .zip(&self.tensors)
            .collect())
    }

    /// Writes `<stem>.bin` + `<stem>.manifest.toml`.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        let mut meta = BTreeMap::new();
        meta.insert(
            "arch".to_string(),
            toml::to_string(&self.arch).map_err(|e| Error::Checkpoint(e.to_string()))?,
        );
        serialize::write(dir, stem, &self.named()?, meta)
    }

    pub fn load(dir: &Path, stem: &str) -> Result<Self> {
        let (manifest, tensors) = serialize::read(dir, stem)?;
        let arch_text = manifest
            .meta
            .get("arch")
            .ok_or_else(|| Error::Checkpoint("weight manifest lacks an arch entry".into()))?;
        let arch: Arch = toml::from_str(arch_text).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let table = shape_table(&arch)?;
        if table.len() != tensors.len() || table.iter().zip(&tensors).any(|((a, _), (b, _))| a != b) {
            return Err(Error::Checkpoint(
                "weight manifest does not follow the shape table".into(),
            ));
        }
        Self::new(arch, tensors.into_iter().map(|(_, t)| t).collect())
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BlockVars {
    pub kernel: Var,
    pub scale: Var,
    pub offset: Var,
}

/// Graph-resident weights. May be leaves or outputs of a generator.
#[derive(Clone, Debug)]
pub struct WeightVars {
    pub blocks: Vec<BlockVars>,
    pub dense_w: Var,
    pub dense_b: Option<Var>,
}

impl WeightVars {
    pub fn from_flat(arch: &Arch, vars: &[Var]) -> Self {
        let blocks = (0..arch.num_blocks)
            .map(|b| BlockVars {
                kernel: vars[3 * b],
                scale: vars[3 * b + 1],
                offset: vars[3 * b + 2],
            })
            .collect();
        let d = 3 * arch.num_blocks;
        Self {
            blocks,
            dense_w: vars[d],
            dense_b: arch.dense_bias.then(|| vars[d + 1]),
        }
    }

    pub fn flat(&self) -> Vec<Var> {
        let mut out: Vec<Var> = self.blocks.iter().flat_map(|b| [b.kernel, b.scale, b.offset]).collect();
        out.push(self.dense_w);
        out.extend(self.dense_b);
        out
    }

    pub fn to_bundle(&self, g: &Graph, arch: &Arch) -> WeightBundle {
        WeightBundle {
            arch: arch.clone(),
            tensors: self.flat().into_iter().map(|v| g.value(v).clone()).collect(),
        }
    }
}

/// Runs the first `upto` blocks on `x: [B,H,W,C]`.
pub fn forward_blocks(g: &mut Graph, w: &WeightVars, x: Var, upto: usize) -> Var {
    let mut h = x;
    for b in &w.blocks[..upto] {
        h = g.conv3x3(h, b.kernel);
        h = g.batch_norm(h, b.scale, b.offset, BN_EPS);
        h = g.relu(h);
        h = g.max_pool2(h);
    }
    h
}

/// Dense layer on the output of the last block. No activation follows.
pub fn dense_head(g: &mut Graph, w: &WeightVars, features: Var) -> Var {
    let b = g.shape(features)[0];
    let flat_dim: usize = g.shape(features)[1..].iter().product();
    let flat = g.reshape(features, &[b, flat_dim]);
    let out = g.matmul(flat, w.dense_w);
    match w.dense_b {
        Some(bias) => g.add_bias(out, bias),
        None => out,
    }
}

/// Embeddings `[B, embed_dim]` of `x: [B,H,W,C]` under graph weights.
pub fn embed(g: &mut Graph, w: &WeightVars, x: Var) -> Var {
    let h = forward_blocks(g, w, x, w.blocks.len());
    dense_head(g, w, h)
}

fn check_images(arch: &Arch, images: &Tensor) -> Result<()> {
    let s = images.shape();
    let want = [arch.input.height, arch.input.width, arch.input.channels];
    if s.len() != 4 || s[1..] != want {
        return Err(Error::Shape(format!("images {s:?} do not match input [B,{want:?}]")));
    }
    if s[0] == 0 {
        return Err(Error::Shape("empty image batch".into()));
    }
    Ok(())
}

/// Embeddings of an image batch under concrete weights. Batch norm uses the
/// statistics of this batch.
pub fn forward_embed(weights: &WeightBundle, images: &Tensor) -> Result<Tensor> {
    weights.validate()?;
    check_images(&weights.arch, images)?;
    let mut g = Graph::new();
    let w = weights.bind(&mut g, false);
    let x = g.constant(images.clone());
    let e = embed(&mut g, &w, x);
    Ok(g.value(e).clone())
}

pub(crate) fn validate_images(arch: &Arch, images: &Tensor) -> Result<()> {
    check_images(arch, images)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_bundle(arch: &Arch, seed: u64) -> WeightBundle {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tensors = shape_table(arch)
            .unwrap()
            .iter()
            .map(|(_, s)| {
                let n: usize = s.iter().product();
                Tensor::new(s.clone(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
            })
            .collect();
        WeightBundle::new(arch.clone(), tensors).unwrap()
    }

    fn random_images(arch: &Arch, b: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = b * arch.input.len();
        let s = arch.input;
        Tensor::new(
            vec![b, s.height, s.width, s.channels],
            (0..n).map(|_| rng.random()).collect(),
        )
    }

    #[test]
    fn omniglot_shape_table() {
        let t = shape_table(&Arch::omniglot()).unwrap();
        assert_eq!(t[0], ("block0.kernel".to_string(), vec![3, 3, 1, 8]));
        for b in 1..4 {
            assert_eq!(t[3 * b].1, vec![3, 3, 8, 8]);
        }
        assert_eq!(t[12], ("dense.w".to_string(), vec![8, 20]));
        assert_eq!(t[13], ("dense.b".to_string(), vec![20]));
        assert_eq!(Arch::omniglot().spatial_after(4), (1, 1));
    }

    #[test]
    fn tiered_dense_output() {
        let t = shape_table(&Arch::tiered_imagenet()).unwrap();
        assert_eq!(t.last().unwrap().1, vec![40]);
    }

    #[test]
    fn smallest_table_and_invalid_archs() {
        let tiny = Arch::new(1, 1, 1, ImageShape::new(2, 2, 1));
        let t = shape_table(&tiny).unwrap();
        assert_eq!(t.len(), 5);
        assert_eq!(param_count(&tiny).unwrap(), 9 + 1 + 1 + 1 + 1);
        assert!(shape_table(&Arch::new(5, 8, 20, ImageShape::new(28, 28, 1))).is_err());
        assert!(shape_table(&Arch::new(0, 8, 20, ImageShape::new(28, 28, 1))).is_err());
    }

    #[test]
    fn zero_weights_are_zero_and_embed_to_constant() {
        let arch = Arch::new(2, 3, 4, ImageShape::new(8, 8, 1));
        let z = zero_weights(&arch).unwrap();
        assert_eq!(z.abs_sum(), 0.0);
        let shapes: Vec<Vec<usize>> = shape_table(&arch).unwrap().into_iter().map(|(_, s)| s).collect();
        assert_eq!(z.tensors.iter().map(|t| t.shape().to_vec()).collect::<Vec<_>>(), shapes);
        let e = forward_embed(&z, &random_images(&arch, 5, 1)).unwrap();
        assert!(e.all_finite());
        for i in 1..5 {
            assert_eq!(e.row(i), e.row(0));
        }
    }

    #[test]
    fn duplicated_inputs_give_identical_rows() {
        let arch = Arch::new(2, 3, 4, ImageShape::new(8, 8, 1));
        let w = random_bundle(&arch, 2);
        let one = random_images(&arch, 1, 3);
        let mut data = one.data().to_vec();
        data.extend_from_slice(one.data());
        let two = Tensor::new(vec![2, 8, 8, 1], data);
        let e = forward_embed(&w, &two).unwrap();
        assert_eq!(e.row(0), e.row(1));
    }

    #[test]
    fn rejects_nonconforming_bundles_and_images() {
        let arch = Arch::new(2, 3, 4, ImageShape::new(8, 8, 1));
        let mut w = random_bundle(&arch, 2);
        assert!(forward_embed(&w, &random_images(&Arch::new(2, 3, 4, ImageShape::new(9, 8, 1)), 2, 0)).is_err());
        w.tensors[0] = Tensor::zeros(&[3, 3, 1, 2]);
        assert!(forward_embed(&w, &random_images(&arch, 2, 0)).is_err());
        w.tensors.pop();
        assert!(w.validate().is_err());
    }

    #[test]
    fn batch_norm_output_is_standardized() {
        let arch = Arch::new(1, 3, 2, ImageShape::new(6, 6, 1));
        let w = random_bundle(&arch, 5);
        let mut g = Graph::new();
        let x = g.constant(random_images(&arch, 4, 9));
        let k = g.constant(w.tensors[0].clone());
        let c = g.conv3x3(x, k);
        let one = g.constant(Tensor::full(&[3], 1.0));
        let zero = g.constant(Tensor::zeros(&[3]));
        let bn = g.batch_norm(c, one, zero, BN_EPS);
        let v = g.value(bn).data();
        for ch in 0..3 {
            let xs: Vec<f64> = v.iter().skip(ch).step_by(3).copied().collect();
            let mean = xs.iter().sum::<f64>() / xs.len() as f64;
            let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / xs.len() as f64;
            assert!(mean.abs() < 1e-4);
            assert!((var - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn embedding_gradients_match_finite_differences() {
        let arch = Arch::new(2, 2, 3, ImageShape::new(8, 8, 1));
        let w = random_bundle(&arch, 7);
        let imgs = random_images(&arch, 3, 8);
        let loss = |b: &WeightBundle| forward_embed(b, &imgs).unwrap().data().iter().sum::<f64>() / 9.0;
        let mut g = Graph::new();
        let wv = w.bind(&mut g, true);
        let x = g.constant(imgs.clone());
        let e = embed(&mut g, &wv, x);
        let s = g.sum(e);
        let l = g.scale(s, 1.0 / 9.0);
        let grads = g.backward(l);
        let h = 1e-6;
        for (ti, var) in wv.flat().into_iter().enumerate() {
            let ad = grads.get_or_zeros(var, w.tensors[ti].len());
            let mut num = 0.0;
            let mut den = 0.0f64;
            for i in 0..w.tensors[ti].len() {
                let mut p = w.clone();
                p.tensors[ti].data_mut()[i] += h;
                let mut m = w.clone();
                m.tensors[ti].data_mut()[i] -= h;
                let fd = (loss(&p) - loss(&m)) / (2.0 * h);
                num += (fd - ad[i]).powi(2);
                den = den.max(fd.abs()).max(ad[i].abs());
            }
            let rel = num.sqrt() / den.max(1e-12);
            assert!(rel < 1e-6, "tensor {ti}: relative error {rel}");
        }
    }

    #[test]
    fn bundle_save_load() {
        let arch = Arch::new(2, 2, 3, ImageShape::new(8, 8, 1));
        let w = random_bundle(&arch, 1);
        let dir = tempfile::tempdir().unwrap();
        w.save(dir.path(), "weights").unwrap();
        let back = WeightBundle::load(dir.path(), "weights").unwrap();
        assert_eq!(back.arch, arch);
        for (a, b) in back.tensors.iter().zip(&w.tensors) {
            assert!(a.max_abs_diff(b) < 1e-7);
        }
    }
}
