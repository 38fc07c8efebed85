//! The transformer weight generator.
//!
//! For each layer of the target CNN, in order, the generator builds one token
//! per support sample and one token per output slice of that layer, runs a
//! shared encoder-only transformer over all of them, and reads the new slice
//! values off the weight-token outputs.
//!
//! * Sample tokens: image features from a small conv extractor, activation
//!   features of the support set under the layers generated so far, and a
//!   label embedding, projected to `model_dim`.
//! * Weight tokens: the matching slice of the previous weights, linearly
//!   projected, plus a learned per-slice placeholder. With all-zero previous
//!   weights only the placeholders remain.
//!
//! One slice is one output channel: conv slices carry a 3x3xC_in kernel plus
//! that channel's batch-norm scale and offset; dense slices carry one column
//! of the dense matrix plus its bias.

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Graph, Var};
use crate::episodes::{images_tensor, Sample, TaskSequence};
use crate::error::{invalid, Error, Result};
use crate::serialize;
use crate::target_cnn::{self, zero_weights, Arch, BlockVars, WeightBundle, WeightVars, BN_EPS};
use crate::tensor::Tensor;

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorConfig {
    /// Conv layers of the image feature extractor.
    pub feat_layers: usize,
    pub feat_channels: usize,
    /// Conv layers of the activation-feature network.
    pub act_layers: usize,
    pub act_channels: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub model_dim: usize,
    pub ff_dim: usize,
    pub label_embed_dim: usize,
    /// Size of the label embedding table; bounds the way of any episode.
    pub max_way: usize,
}

impl GeneratorConfig {
    /// 3-layer, 2-head transformer used for Omniglot.
    pub fn omniglot() -> Self {
        Self {
            feat_layers: 4,
            feat_channels: 32,
            act_layers: 2,
            act_channels: 32,
            num_layers: 3,
            num_heads: 2,
            model_dim: 128,
            ff_dim: 256,
            label_embed_dim: 32,
            max_way: 100,
        }
    }

    /// 1-layer, 8-head transformer used for tieredImageNet.
    pub fn tiered_imagenet() -> Self {
        Self {
            num_layers: 1,
            num_heads: 8,
            model_dim: 256,
            ff_dim: 512,
            feat_channels: 64,
            act_channels: 64,
            ..Self::omniglot()
        }
    }

    /// Small configuration for CPU-scale experiments.
    pub fn desk() -> Self {
        Self {
            feat_layers: 2,
            feat_channels: 8,
            act_layers: 2,
            act_channels: 8,
            num_layers: 2,
            num_heads: 2,
            model_dim: 32,
            ff_dim: 64,
            label_embed_dim: 8,
            max_way: 20,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("feat_layers", self.feat_layers),
            ("feat_channels", self.feat_channels),
            ("act_channels", self.act_channels),
            ("num_layers", self.num_layers),
            ("num_heads", self.num_heads),
            ("model_dim", self.model_dim),
            ("ff_dim", self.ff_dim),
            ("label_embed_dim", self.label_embed_dim),
            ("max_way", self.max_way),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(invalid(format!("generator.{name} must be positive")));
        }
        if !self.model_dim.is_multiple_of(self.num_heads) {
            return Err(invalid(format!(
                "model_dim {} is not divisible by num_heads {}",
                self.model_dim, self.num_heads
            )));
        }
        Ok(())
    }
}

/// Number of slices (tokens) and values per slice for generated layer `l`.
pub fn slice_geometry(arch: &Arch, layer: usize) -> (usize, usize) {
    if layer < arch.num_blocks {
        (arch.channels, 9 * arch.block_in_channels(layer) + 2)
    } else {
        (arch.embed_dim, arch.flat_dim() + usize::from(arch.dense_bias))
    }
}

enum Init {
    Normal(f64),
    /// Row-major matrix whose column `j` has standard deviation `stds[j]`.
    ColumnNormal(Vec<f64>),
    Zeros,
    Values(Vec<f64>),
}

#[derive(Clone, Debug, PartialEq)]
struct ConvIdx {
    kernel: usize,
    bias: usize,
}

#[derive(Clone, Debug, PartialEq)]
struct LayerIdx {
    sample_embed: usize,
    placeholder: usize,
    prev_proj: usize,
    readout_w: usize,
    readout_b: usize,
}

#[derive(Clone, Debug, PartialEq)]
struct BlockIdx {
    ln1_g: usize,
    ln1_b: usize,
    wq: usize,
    wk: usize,
    wv: usize,
    wo: usize,
    ln2_g: usize,
    ln2_b: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

/// Positions of every named parameter in `GeneratorState::params`.
#[derive(Clone, Debug, PartialEq)]
struct Layout {
    feat: Vec<ConvIdx>,
    act: Vec<ConvIdx>,
    label_embed: usize,
    sample_w: usize,
    sample_b: usize,
    layers: Vec<LayerIdx>,
    blocks: Vec<BlockIdx>,
    final_g: usize,
    final_b: usize,
}

struct LayoutBuilder {
    specs: Vec<(String, Vec<usize>, Init)>,
}

impl LayoutBuilder {
    fn add(&mut self, name: impl Into<String>, shape: &[usize], init: Init) -> usize {
        self.specs.push((name.into(), shape.to_vec(), init));
        self.specs.len() - 1
    }

    fn conv_stack(&mut self, prefix: &str, layers: usize, cin: usize, c: usize) -> Vec<ConvIdx> {
        (0..layers)
            .map(|i| {
                let ci = if i == 0 { cin } else { c };
                let std = (2.0 / (9 * ci) as f64).sqrt();
                ConvIdx {
                    kernel: self.add(format!("{prefix}.conv{i}.kernel"), &[3, 3, ci, c], Init::Normal(std)),
                    bias: self.add(format!("{prefix}.conv{i}.bias"), &[c], Init::Zeros),
                }
            })
            .collect()
    }
}

/// Std of transformer matrices.
const TRANSFORMER_STD: f64 = 0.02;

fn build_layout(cfg: &GeneratorConfig, arch: &Arch) -> (Layout, Vec<(String, Vec<usize>, Init)>) {
    let md = cfg.model_dim;
    let mut b = LayoutBuilder { specs: Vec::new() };
    let feat = b.conv_stack("feat", cfg.feat_layers, arch.input.channels, cfg.feat_channels);
    let act = b.conv_stack("act", cfg.act_layers, arch.channels, cfg.act_channels);
    let label_embed = b.add("label_embed", &[cfg.max_way, cfg.label_embed_dim], Init::Normal(1.0));
    let sample_in = cfg.feat_channels + cfg.act_channels + cfg.label_embed_dim;
    let sample_w = b.add(
        "sample_proj.w",
        &[sample_in, md],
        Init::Normal((1.0 / sample_in as f64).sqrt()),
    );
    let sample_b = b.add("sample_proj.b", &[md], Init::Zeros);
    let mut layers = Vec::new();
    for l in 0..arch.num_layers() {
        let (n_slices, slice_len) = slice_geometry(arch, l);
        let (kernel_len, kernel_std, readout_bias) = if l < arch.num_blocks {
            let k = 9 * arch.block_in_channels(l);
            let mut bias = vec![0.0; slice_len];
            bias[k] = 1.0; // batch-norm scale starts at one
            (k, (2.0 / k as f64).sqrt(), bias)
        } else {
            let k = arch.flat_dim();
            (k, (1.0 / k as f64).sqrt(), vec![0.0; slice_len])
        };
        // Read-out columns are scaled so that unit-variance tokens give
        // fan-in scaled weights.
        let col_std: Vec<f64> = (0..slice_len)
            .map(|j| if j < kernel_len { kernel_std } else { 0.1 } / (md as f64).sqrt())
            .collect();
        layers.push(LayerIdx {
            sample_embed: b.add(format!("layer{l}.sample_embed"), &[md], Init::Normal(1.0)),
            placeholder: b.add(format!("layer{l}.placeholder"), &[n_slices, md], Init::Normal(1.0)),
            prev_proj: b.add(
                format!("layer{l}.prev_proj"),
                &[slice_len, md],
                Init::Normal((1.0 / slice_len as f64).sqrt()),
            ),
            readout_w: b.add(
                format!("layer{l}.readout.w"),
                &[md, slice_len],
                Init::ColumnNormal(col_std),
            ),
            readout_b: b.add(format!("layer{l}.readout.b"), &[slice_len], Init::Values(readout_bias)),
        });
    }
    let blocks = (0..cfg.num_layers)
        .map(|i| {
            let p = format!("tf{i}");
            BlockIdx {
                ln1_g: b.add(format!("{p}.ln1.g"), &[md], Init::Values(vec![1.0; md])),
                ln1_b: b.add(format!("{p}.ln1.b"), &[md], Init::Zeros),
                wq: b.add(format!("{p}.attn.wq"), &[md, md], Init::Normal(TRANSFORMER_STD)),
                wk: b.add(format!("{p}.attn.wk"), &[md, md], Init::Normal(TRANSFORMER_STD)),
                wv: b.add(format!("{p}.attn.wv"), &[md, md], Init::Normal(TRANSFORMER_STD)),
                wo: b.add(format!("{p}.attn.wo"), &[md, md], Init::Normal(TRANSFORMER_STD)),
                ln2_g: b.add(format!("{p}.ln2.g"), &[md], Init::Values(vec![1.0; md])),
                ln2_b: b.add(format!("{p}.ln2.b"), &[md], Init::Zeros),
                w1: b.add(format!("{p}.ff.w1"), &[md, cfg.ff_dim], Init::Normal(TRANSFORMER_STD)),
                b1: b.add(format!("{p}.ff.b1"), &[cfg.ff_dim], Init::Zeros),
                w2: b.add(format!("{p}.ff.w2"), &[cfg.ff_dim, md], Init::Normal(TRANSFORMER_STD)),
                b2: b.add(format!("{p}.ff.b2"), &[md], Init::Zeros),
            }
        })
        .collect();
    let final_g = b.add("final_ln.g", &[md], Init::Values(vec![1.0; md]));
    let final_b = b.add("final_ln.b", &[md], Init::Zeros);
    (
        Layout {
            feat,
            act,
            label_embed,
            sample_w,
            sample_b,
            layers,
            blocks,
            final_g,
            final_b,
        },
        b.specs,
    )
}

/// Every trainable tensor of the generator plus the step counter.
#[derive(Clone, Debug)]
pub struct GeneratorState {
    pub cfg: GeneratorConfig,
    pub arch: Arch,
    pub names: Vec<String>,
    pub params: Vec<Tensor>,
    pub step: u64,
    layout: Layout,
}

impl PartialEq for GeneratorState {
    fn eq(&self, other: &Self) -> bool {
        self.cfg == other.cfg
            && self.arch == other.arch
            && self.names == other.names
            && self.params == other.params
            && self.step == other.step
    }
}

/// Normal draws truncated at two standard deviations.
fn truncated_normal(rng: &mut ChaCha8Rng, std: f64, n: usize) -> Vec<f64> {
    let dist = Normal::new(0.0, 1.0).unwrap();
    (0..n)
        .map(|_| loop {
            let z: f64 = dist.sample(rng);
            if z.abs() <= 2.0 {
                break z * std;
            }
        })
        .collect()
}

/// Deterministic initialization from `seed`.
pub fn init_generator(cfg: &GeneratorConfig, arch: &Arch, seed: u64) -> Result<GeneratorState> {
    cfg.validate()?;
    arch.validate()?;
    let (layout, specs) = build_layout(cfg, arch);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut names = Vec::with_capacity(specs.len());
    let mut params = Vec::with_capacity(specs.len());
    for (name, shape, init) in specs {
        let n: usize = shape.iter().product();
        let data = match init {
            Init::Normal(std) => truncated_normal(&mut rng, std, n),
            Init::ColumnNormal(stds) => truncated_normal(&mut rng, 1.0, n)
                .into_iter()
                .enumerate()
                .map(|(i, z)| z * stds[i % stds.len()])
                .collect(),
            Init::Zeros => vec![0.0; n],
            Init::Values(v) => v,
        };
        names.push(name);
        params.push(Tensor::new(shape, data));
    }
    Ok(GeneratorState {
        cfg: cfg.clone(),
        arch: arch.clone(),
        names,
        params,
        step: 0,
        layout,
    })
}

impl GeneratorState {
    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    /// Hex digest identifying the generator and target architecture.
    pub fn fingerprint(&self) -> String {
        fingerprint(&self.cfg, &self.arch)
    }

    /// Places every parameter on the graph.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundGenerator<'_> {
        let vars = self
            .params
            .iter()
            .map(|t| {
                if trainable {
                    g.param(t.clone())
                } else {
                    g.constant(t.clone())
                }
            })
            .collect();
        BoundGenerator { state: self, vars }
    }

    /// Plain SGD: `p -= lr * grad` for each tensor.
    pub fn sgd_step(&mut self, grads: &[Vec<f64>], lr: f64) {
        assert_eq!(grads.len(), self.params.len());
        for (p, g) in self.params.iter_mut().zip(grads) {
            for (v, d) in p.data_mut().iter_mut().zip(g) {
                *v -= lr * d;
            }
        }
        self.step += 1;
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let mut meta = BTreeMap::new();
        meta.insert("fingerprint".into(), self.fingerprint());
        meta.insert("step".into(), self.step.to_string());
        meta.insert("generator".into(), to_toml(&self.cfg)?);
        meta.insert("arch".into(), to_toml(&self.arch)?);
        let named: Vec<(String, &Tensor)> = self.names.iter().cloned().zip(&self.params).collect();
        serialize::write(dir, "generator", &named, meta)
    }

    /// Loads a checkpoint, refusing it when its fingerprint differs from
    /// `expected` (when given) or from its own recorded configuration.
    pub fn load(dir: &Path, expected: Option<&str>) -> Result<Self> {
        let (manifest, tensors) = serialize::read(dir, "generator")?;
        let get = |k: &str| {
            manifest
                .meta
                .get(k)
                .ok_or_else(|| Error::Checkpoint(format!("checkpoint manifest lacks `{k}`")))
        };
        let cfg: GeneratorConfig = toml::from_str(get("generator")?).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let arch: Arch = toml::from_str(get("arch")?).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let recorded = get("fingerprint")?;
        let actual = fingerprint(&cfg, &arch);
        if recorded != &actual {
            return Err(Error::Checkpoint(format!(
                "checkpoint fingerprint {recorded} does not match its configuration ({actual})"
            )));
        }
        if let Some(want) = expected {
            if want != actual {
                return Err(Error::Checkpoint(format!(
                    "fingerprint mismatch: checkpoint {actual}, run configuration {want}"
                )));
            }
        }
        let step: u64 = get("step")?.parse().map_err(|_| Error::Checkpoint("bad step".into()))?;
        let mut state = init_generator(&cfg, &arch, 0)?;
        if tensors.len() != state.params.len() {
            return Err(Error::Checkpoint("parameter count differs from configuration".into()));
        }
        for (i, (name, t)) in tensors.into_iter().enumerate() {
            if name != state.names[i] || t.shape() != state.params[i].shape() {
                return Err(Error::Checkpoint(format!("unexpected tensor {name} {:?}", t.shape())));
            }
            state.params[i] = t;
        }
        state.step = step;
        Ok(state)
    }
}

fn to_toml<T: Serialize>(v: &T) -> Result<String> {
    toml::to_string(v).map_err(|e| Error::Checkpoint(e.to_string()))
}

pub fn fingerprint(cfg: &GeneratorConfig, arch: &Arch) -> String {
    let mut h = Sha256::new();
    h.update(toml::to_string(cfg).unwrap_or_default());
    h.update(b"\n--\n");
    h.update(toml::to_string(arch).unwrap_or_default());
    h.finalize().iter().take(8).map(|b| format!("{b:02x}")).collect()
}

/// Generator parameters living on a graph.
pub struct BoundGenerator<'a> {
    pub state: &'a GeneratorState,
    pub vars: Vec<Var>,
}

/// Switches used by gradient-flow diagnostics.
#[derive(Clone, Copy, Debug, Default)]
pub struct GenerateOptions {
    /// Zero every sample token, so the new weights see the past only through
    /// the previous-weight tokens.
    pub ablate_support: bool,
}

/// Provenance of a token.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TokenKind {
    Sample,
    Placeholder,
}

/// Transformer input for one generated layer.
#[derive(Clone, Debug)]
pub struct TokenBatch {
    pub layer: usize,
    pub sample_tokens: Tensor,
    pub weight_tokens: Tensor,
    pub kinds: Vec<TokenKind>,
}

impl TokenBatch {
    pub fn len(&self) -> usize {
        self.kinds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kinds.is_empty()
    }
}

/// Support images and labels as they enter a generator graph.
#[derive(Clone, Copy, Debug)]
pub struct SupportVars<'s> {
    pub images: Var,
    pub labels: &'s [usize],
}

impl<'a> BoundGenerator<'a> {
    fn p(&self, i: usize) -> Var {
        self.vars[i]
    }

    fn arch(&self) -> &Arch {
        &self.state.arch
    }

    fn conv_features(&self, g: &mut Graph, stack: &[ConvIdx], x: Var, pool: bool) -> Var {
        let mut h = x;
        for c in stack {
            h = g.conv3x3(h, self.p(c.kernel));
            h = g.add_bias(h, self.p(c.bias));
            h = g.relu(h);
            let s = g.shape(h);
            if pool && s[1] >= 2 && s[2] >= 2 {
                h = g.max_pool2(h);
            }
        }
        g.global_avg_pool(h)
    }

    /// Feature vector of each support image, `[n, feat_channels]`.
    pub fn image_features(&self, g: &mut Graph, images: Var) -> Var {
        let stack = self.state.layout.feat.clone();
        self.conv_features(g, &stack, images, true)
    }

    fn activation_features(&self, g: &mut Graph, acts: Option<Var>, n: usize) -> Var {
        match acts {
            None => g.constant(Tensor::zeros(&[n, self.state.cfg.act_channels])),
            Some(a) if self.state.cfg.act_layers == 0 => {
                // Without an activation network, fall back to pooled
                // activations padded to act_channels.
                let pooled = g.global_avg_pool(a);
                let c = g.shape(pooled)[1];
                let want = self.state.cfg.act_channels;
                if c >= want {
                    g.slice_cols(pooled, 0, want)
                } else {
                    let pad = g.constant(Tensor::zeros(&[n, want - c]));
                    g.concat_cols(&[pooled, pad])
                }
            }
            Some(a) => {
                let stack = self.state.layout.act.clone();
                self.conv_features(g, &stack, a, false)
            }
        }
    }

    fn label_embeddings(&self, g: &mut Graph, labels: &[usize]) -> Result<Var> {
        let max = self.state.cfg.max_way;
        if let Some(bad) = labels.iter().find(|&&l| l >= max) {
            return Err(invalid(format!("label {bad} exceeds generator.max_way {max}")));
        }
        Ok(g.gather_rows(self.p(self.state.layout.label_embed), labels))
    }

    /// Rows `[n_slices, slice_len]` holding the slices of layer `l`.
    fn weight_slices(&self, g: &mut Graph, w: &WeightVars, l: usize) -> Var {
        let arch = self.arch();
        if l < arch.num_blocks {
            let b = w.blocks[l];
            let cin = arch.block_in_channels(l);
            let co = arch.channels;
            let k = g.reshape(b.kernel, &[9 * cin, co]);
            let kt = g.transpose(k);
            let s = g.reshape(b.scale, &[co, 1]);
            let o = g.reshape(b.offset, &[co, 1]);
            g.concat_cols(&[kt, s, o])
        } else {
            let wt = g.transpose(w.dense_w);
            match w.dense_b {
                Some(bias) => {
                    let bc = g.reshape(bias, &[arch.embed_dim, 1]);
                    g.concat_cols(&[wt, bc])
                }
                None => wt,
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn tokens(
        &self,
        g: &mut Graph,
        l: usize,
        img_feats: Var,
        label_emb: Var,
        acts: Option<Var>,
        prev: &WeightVars,
        opts: GenerateOptions,
    ) -> (Var, Var) {
        let n = g.shape(img_feats)[0];
        let li = self.state.layout.layers[l].clone();
        let act = self.activation_features(g, acts, n);
        let x = g.concat_cols(&[img_feats, act, label_emb]);
        let s = g.matmul(x, self.p(self.state.layout.sample_w));
        let s = g.add_bias(s, self.p(self.state.layout.sample_b));
        let mut s = g.add_bias(s, self.p(li.sample_embed));
        if opts.ablate_support {
            s = g.scale(s, 0.0);
        }
        let slices = self.weight_slices(g, prev, l);
        let proj = g.matmul(slices, self.p(li.prev_proj));
        let w = g.add(proj, self.p(li.placeholder));
        (s, w)
    }

    fn transformer(&self, g: &mut Graph, x: Var) -> Var {
        let cfg = &self.state.cfg;
        let dh = cfg.model_dim / cfg.num_heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut x = x;
        for b in self.state.layout.blocks.clone() {
            let h = g.layer_norm(x, self.p(b.ln1_g), self.p(b.ln1_b), LN_EPS);
            let q = g.matmul(h, self.p(b.wq));
            let k = g.matmul(h, self.p(b.wk));
            let v = g.matmul(h, self.p(b.wv));
            let heads: Vec<Var> = (0..cfg.num_heads)
                .map(|hd| {
                    let qh = g.slice_cols(q, hd * dh, dh);
                    let kh = g.slice_cols(k, hd * dh, dh);
                    let vh = g.slice_cols(v, hd * dh, dh);
                    let s = g.matmul_nt(qh, kh);
                    let s = g.scale(s, scale);
                    let a = g.softmax_rows(s);
                    g.matmul(a, vh)
                })
                .collect();
            let cat = if heads.len() == 1 {
                heads[0]
            } else {
                g.concat_cols(&heads)
            };
            let o = g.matmul(cat, self.p(b.wo));
            x = g.add(x, o);
            let h = g.layer_norm(x, self.p(b.ln2_g), self.p(b.ln2_b), LN_EPS);
            let f = g.matmul(h, self.p(b.w1));
            let f = g.add_bias(f, self.p(b.b1));
            let f = g.gelu(f);
            let f = g.matmul(f, self.p(b.w2));
            let f = g.add_bias(f, self.p(b.b2));
            x = g.add(x, f);
        }
        g.layer_norm(
            x,
            self.p(self.state.layout.final_g),
            self.p(self.state.layout.final_b),
            LN_EPS,
        )
    }

    /// Turns read-out rows back into layer tensors.
    fn unpack_layer(&self, g: &mut Graph, l: usize, rows: Var) -> LayerOut {
        let arch = self.arch();
        if l < arch.num_blocks {
            let cin = arch.block_in_channels(l);
            let co = arch.channels;
            let k = g.slice_cols(rows, 0, 9 * cin);
            let kt = g.transpose(k);
            let kernel = g.reshape(kt, &[3, 3, cin, co]);
            let s = g.slice_cols(rows, 9 * cin, 1);
            let scale = g.reshape(s, &[co]);
            let o = g.slice_cols(rows, 9 * cin + 1, 1);
            let offset = g.reshape(o, &[co]);
            LayerOut::Block(BlockVars { kernel, scale, offset })
        } else {
            let flat = arch.flat_dim();
            let w = g.slice_cols(rows, 0, flat);
            let dense_w = g.transpose(w);
            let dense_b = arch.dense_bias.then(|| {
                let b = g.slice_cols(rows, flat, 1);
                g.reshape(b, &[arch.embed_dim])
            });
            LayerOut::Dense(dense_w, dense_b)
        }
    }

    /// Runs the per-layer generation loop. `stop_at` returns the token batch
    /// of that layer instead of finishing.
    fn run(
        &self,
        g: &mut Graph,
        support: SupportVars<'_>,
        prev: &WeightVars,
        opts: GenerateOptions,
        stop_at: Option<usize>,
    ) -> Result<Generated> {
        let arch = self.arch().clone();
        let n = g.shape(support.images)[0];
        if n == 0 {
            return Err(invalid("support set is empty"));
        }
        if support.labels.len() != n {
            return Err(Error::Shape(format!(
                "{} labels for {n} support images",
                support.labels.len()
            )));
        }
        let feats = self.image_features(g, support.images);
        let labels = self.label_embeddings(g, support.labels)?;
        let mut blocks: Vec<BlockVars> = Vec::with_capacity(arch.num_blocks);
        let mut acts: Option<Var> = None;
        let mut h = support.images;
        for l in 0..arch.num_layers() {
            let (s_tok, w_tok) = self.tokens(g, l, feats, labels, acts, prev, opts);
            if stop_at == Some(l) {
                return Ok(Generated::Tokens(s_tok, w_tok));
            }
            let all = g.concat_rows(&[s_tok, w_tok]);
            let out = self.transformer(g, all);
            let n_slices = g.shape(w_tok)[0];
            let wout = g.slice_rows(out, n, n_slices);
            let li = &self.state.layout.layers[l];
            let r = g.matmul(wout, self.p(li.readout_w));
            let rows = g.add_bias(r, self.p(li.readout_b));
            if !g.value(rows).all_finite() {
                return Err(Error::NonFinite(format!("generated layer {l}")));
            }
            match self.unpack_layer(g, l, rows) {
                LayerOut::Block(b) => {
                    h = g.conv3x3(h, b.kernel);
                    h = g.batch_norm(h, b.scale, b.offset, BN_EPS);
                    h = g.relu(h);
                    h = g.max_pool2(h);
                    acts = Some(h);
                    blocks.push(b);
                }
                LayerOut::Dense(dense_w, dense_b) => {
                    return Ok(Generated::Weights(WeightVars {
                        blocks,
                        dense_w,
                        dense_b,
                    }));
                }
            }
        }
        unreachable!("the dense layer always ends generation")
    }

    /// New weights from a support set and the previous weights.
    pub fn generate(
        &self,
        g: &mut Graph,
        support: SupportVars<'_>,
        prev: &WeightVars,
        opts: GenerateOptions,
    ) -> Result<WeightVars> {
        match self.run(g, support, prev, opts, None)? {
            Generated::Weights(w) => Ok(w),
            Generated::Tokens(..) => unreachable!(),
        }
    }
}

enum LayerOut {
    Block(BlockVars),
    Dense(Var, Option<Var>),
}

enum Generated {
    Weights(WeightVars),
    Tokens(Var, Var),
}

fn check_prev(state: &GeneratorState, prev: &WeightBundle) -> Result<()> {
    if prev.arch != state.arch {
        return Err(Error::Shape("previous weights use a different architecture".into()));
    }
    prev.validate()
}

fn support_inputs(state: &GeneratorState, g: &mut Graph, support: &[Sample]) -> Result<(Var, Vec<usize>)> {
    if support.is_empty() {
        return Err(invalid("support set is empty"));
    }
    let shape = state.arch.input;
    if support.iter().any(|s| s.image.len() != shape.len()) {
        return Err(Error::Shape(
            "support image does not match the architecture input".into(),
        ));
    }
    let imgs = images_tensor(support, shape);
    target_cnn::validate_images(&state.arch, &imgs)?;
    Ok((g.constant(imgs), support.iter().map(|s| s.label).collect()))
}

/// Token batch fed to the transformer for `layer`, with the earlier layers
/// generated from the same support set and previous weights.
pub fn encode_support(
    state: &GeneratorState,
    support: &[Sample],
    prev: &WeightBundle,
    layer: usize,
) -> Result<TokenBatch> {
    if layer >= state.arch.num_layers() {
        return Err(invalid(format!(
            "layer {layer} out of range; the architecture has {} generated layers",
            state.arch.num_layers()
        )));
    }
    check_prev(state, prev)?;
    let mut g = Graph::new();
    let bound = state.bind(&mut g, false);
    let (images, labels) = support_inputs(state, &mut g, support)?;
    let pv = prev.bind(&mut g, false);
    let sv = SupportVars {
        images,
        labels: &labels,
    };
    match bound.run(&mut g, sv, &pv, GenerateOptions::default(), Some(layer))? {
        Generated::Tokens(s, w) => {
            let mut kinds = vec![TokenKind::Sample; g.shape(s)[0]];
            kinds.extend(std::iter::repeat_n(TokenKind::Placeholder, g.shape(w)[0]));
            Ok(TokenBatch {
                layer,
                sample_tokens: g.value(s).clone(),
                weight_tokens: g.value(w).clone(),
                kinds,
            })
        }
        Generated::Weights(_) => unreachable!(),
    }
}

/// `theta_t = a(S_t, theta_{t-1})` on concrete values.
pub fn generate_weights(state: &GeneratorState, support: &[Sample], prev: &WeightBundle) -> Result<WeightBundle> {
    check_prev(state, prev)?;
    let mut g = Graph::new();
    let bound = state.bind(&mut g, false);
    let (images, labels) = support_inputs(state, &mut g, support)?;
    let pv = prev.bind(&mut g, false);
    let sv = SupportVars {
        images,
        labels: &labels,
    };
    let w = bound.generate(&mut g, sv, &pv, GenerateOptions::default())?;
    Ok(w.to_bundle(&g, &state.arch))
}

/// The single-task generator: weights from a support set alone, i.e. with
/// all-zero previous weights.
pub fn ht_generate(state: &GeneratorState, support: &[Sample]) -> Result<WeightBundle> {
    generate_weights(state, support, &zero_weights(&state.arch)?)
}

/// `[theta_0, ..., theta_{T-1}]` with `theta_{-1} = 0`. Step `t` sees only the
/// support set of task `t`.
pub fn unroll(state: &GeneratorState, tasks: &TaskSequence) -> Result<Vec<WeightBundle>> {
    if tasks.is_empty() {
        return Err(invalid("cannot unroll an empty task sequence"));
    }
    let mut out: Vec<WeightBundle> = Vec::with_capacity(tasks.len());
    let mut prev = zero_weights(&state.arch)?;
    for task in &tasks.tasks {
        let next = generate_weights(state, &task.support, &prev)?;
        out.push(next.clone());
        prev = next;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::episodes::{make_synthetic_pool, sample_episode, sample_task_sequence, ImageShape, Regime};
    use crate::target_cnn::shape_table;

    fn tiny() -> (GeneratorConfig, Arch) {
        let cfg = GeneratorConfig {
            feat_layers: 2,
            feat_channels: 4,
            act_layers: 1,
            act_channels: 4,
            num_layers: 1,
            num_heads: 2,
            model_dim: 8,
            ff_dim: 16,
            label_embed_dim: 4,
            max_way: 6,
        };
        (cfg, Arch::new(2, 3, 4, ImageShape::new(8, 8, 1)))
    }

    fn episode(seed: u64) -> crate::episodes::Episode {
        let pool = make_synthetic_pool(8, 6, ImageShape::new(8, 8, 1), 1).unwrap();
        sample_episode(&pool, 5, 1, 2, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let (cfg, arch) = tiny();
        let a = init_generator(&cfg, &arch, 3).unwrap();
        let b = init_generator(&cfg, &arch, 3).unwrap();
        let c = init_generator(&cfg, &arch, 4).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.params, c.params);
    }

    #[test]
    fn preset_configs_construct() {
        assert!(init_generator(&GeneratorConfig::omniglot(), &Arch::omniglot(), 0).is_ok());
        let mut bad = GeneratorConfig::desk();
        bad.num_heads = 3;
        assert!(init_generator(&bad, &Arch::omniglot(), 0).is_err());
    }

    #[test]
    fn token_counts_and_placeholder_case() {
        let (mut cfg, mut arch) = tiny();
        arch.channels = 8;
        cfg.max_way = 5;
        let state = init_generator(&cfg, &arch, 1).unwrap();
        let ep = episode(0);
        let zero = zero_weights(&arch).unwrap();
        let tb = encode_support(&state, &ep.support, &zero, 1).unwrap();
        assert_eq!(tb.len(), 13);
        assert_eq!(tb.kinds.iter().filter(|k| **k == TokenKind::Placeholder).count(), 8);
        // Zero previous weights leave exactly the learned placeholders.
        let ph = &state.params[state.layout.layers[1].placeholder];
        assert_eq!(&tb.weight_tokens, ph);
        assert!(encode_support(&state, &ep.support, &zero, 3).is_err());
    }

    #[test]
    fn output_conforms_and_is_deterministic() {
        let (cfg, arch) = tiny();
        let state = init_generator(&cfg, &arch, 2).unwrap();
        let ep = episode(1);
        let a = ht_generate(&state, &ep.support).unwrap();
        let b = ht_generate(&state, &ep.support).unwrap();
        assert_eq!(a, b);
        let shapes: Vec<Vec<usize>> = shape_table(&arch).unwrap().into_iter().map(|(_, s)| s).collect();
        assert_eq!(a.tensors.iter().map(|t| t.shape().to_vec()).collect::<Vec<_>>(), shapes);
        assert!(a.validate().is_ok());
    }

    #[test]
    fn support_order_does_not_matter() {
        let (cfg, arch) = tiny();
        let state = init_generator(&cfg, &arch, 5).unwrap();
        let ep = episode(2);
        let a = ht_generate(&state, &ep.support).unwrap();
        let mut rev = ep.support.clone();
        rev.reverse();
        let b = ht_generate(&state, &rev).unwrap();
        for (x, y) in a.tensors.iter().zip(&b.tensors) {
            assert!(x.max_abs_diff(y) <= 1e-5);
        }
    }

    #[test]
    fn unroll_matches_recomputation_and_extends_beyond_training_length() {
        let (cfg, arch) = tiny();
        let state = init_generator(&cfg, &arch, 6).unwrap();
        let pool = make_synthetic_pool(8, 6, ImageShape::new(8, 8, 1), 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let seq =
            sample_task_sequence(std::slice::from_ref(&pool), 3, Regime::SingleDomain, 3, 1, 1, &mut rng).unwrap();
        let per_step = unroll(&state, &seq).unwrap();
        assert_eq!(per_step.len(), 3);
        assert_eq!(per_step[0], ht_generate(&state, &seq.tasks[0].support).unwrap());
        let again = generate_weights(&state, &seq.tasks[1].support, &per_step[0]).unwrap();
        assert_eq!(again, per_step[1]);
        let long = sample_task_sequence(&[pool], 5, Regime::SingleDomain, 3, 1, 1, &mut rng).unwrap();
        assert_eq!(unroll(&state, &long).unwrap().len(), 5);
    }

    #[test]
    fn rejects_bad_inputs() {
        let (cfg, arch) = tiny();
        let state = init_generator(&cfg, &arch, 6).unwrap();
        assert!(ht_generate(&state, &[]).is_err());
        let mut ep = episode(0);
        ep.support[0].label = 6;
        assert!(ht_generate(&state, &ep.support).is_err());
        let other = zero_weights(&Arch::new(1, 3, 4, ImageShape::new(8, 8, 1))).unwrap();
        assert!(generate_weights(&state, &episode(0).support, &other).is_err());
    }

    #[test]
    fn checkpoint_round_trip_and_fingerprint_guard() {
        let (cfg, arch) = tiny();
        let mut state = init_generator(&cfg, &arch, 6).unwrap();
        state.step = 42;
        let dir = tempfile::tempdir().unwrap();
        state.save(dir.path()).unwrap();
        let back = GeneratorState::load(dir.path(), Some(&state.fingerprint())).unwrap();
        assert_eq!(back.step, 42);
        for (a, b) in back.params.iter().zip(&state.params) {
            assert!(a.max_abs_diff(b) < 1e-6);
        }
        assert!(GeneratorState::load(dir.path(), Some("deadbeef")).is_err());
    }
}
