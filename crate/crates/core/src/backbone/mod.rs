//! Convolutional backbones with attention inserted after chosen blocks.
//!
//! For blocks `B_1..B_K` and placement set `S` the feature pipeline is
//! `x_k = A_k(B_k(x_{k-1}))` when `k` is in `S` and `x_k = B_k(x_{k-1})`
//! otherwise; logits are a linear map of the global average of `x_K`.
//! For dense backbones the transition after block `k` belongs to `B_{k+1}`,
//! so attention sits between a dense block and its transition.

pub mod spec;

use std::cell::{Cell, RefCell};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use spec::{
    placement_options, preset, Backbone, DenseBlockSpec, InputShape, ModelSpec, PlacementSet, StageShape,
    VggBlockSpec, PRESET_NAMES,
};

use crate::attention::{AttentionMaps, Cbam};
use crate::error::{Error, Result};
use crate::params::{ParamStore, SharedStats};
use crate::tensor::ops::{self, NormMode, PoolMode};
use crate::tensor::{Element, Tensor};

#[derive(Debug)]
struct Norm<T: Element> {
    scale: Tensor<T>,
    shift: Tensor<T>,
    stats: SharedStats<T>,
}

impl<T: Element> Norm<T> {
    fn new(store: &mut ParamStore<T>, prefix: &str, channels: usize) -> Result<Self> {
        Ok(Norm {
            scale: store.add_constant(format!("{prefix}.scale"), &[channels], 1.0)?,
            shift: store.add_constant(format!("{prefix}.shift"), &[channels], 0.0)?,
            stats: store.add_buffer(format!("{prefix}.running"), channels)?,
        })
    }

    fn forward(&self, x: &Tensor<T>, mode: NormMode) -> Result<Tensor<T>> {
        ops::batch_norm(x, &self.scale, &self.shift, &mut self.stats.borrow_mut(), mode)
    }
}

#[derive(Debug)]
struct Conv<T: Element> {
    weight: Tensor<T>,
    bias: Option<Tensor<T>>,
    padding: usize,
}

impl<T: Element> Conv<T> {
    fn new(
        store: &mut ParamStore<T>,
        prefix: &str,
        (cin, cout, k): (usize, usize, usize),
        bias: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let fan_in = cin * k * k;
        let weight = store.add_he_uniform(format!("{prefix}.weight"), &[cout, cin, k, k], fan_in, rng)?;
        let bias = if bias {
            Some(store.add_constant(format!("{prefix}.bias"), &[cout], 0.0)?)
        } else {
            None
        };
        Ok(Conv {
            weight,
            bias,
            padding: (k - 1) / 2,
        })
    }

    fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let y = ops::conv2d(x, &self.weight, 1, self.padding)?;
        match &self.bias {
            Some(b) => ops::add_channel_bias(&y, b),
            None => Ok(y),
        }
    }
}

#[derive(Debug)]
struct DenseLayer<T: Element> {
    norm: Norm<T>,
    conv: Conv<T>,
}

#[derive(Debug)]
struct Transition<T: Element> {
    norm: Norm<T>,
    conv: Conv<T>,
}

#[derive(Debug)]
struct Stem<T: Element> {
    conv: Conv<T>,
    norm: Norm<T>,
}

#[derive(Debug)]
enum Stage<T: Element> {
    Dense {
        stem: Option<Stem<T>>,
        transition: Option<Transition<T>>,
        layers: Vec<DenseLayer<T>>,
    },
    Vgg {
        convs: Vec<Conv<T>>,
    },
}

impl<T: Element> Stage<T> {
    fn forward(&self, x: &Tensor<T>, mode: NormMode) -> Result<Tensor<T>> {
        match self {
            Stage::Dense {
                stem,
                transition,
                layers,
            } => {
                let mut x = x.clone();
                if let Some(s) = stem {
                    let y = ops::relu(&s.norm.forward(&s.conv.forward(&x)?, mode)?);
                    x = ops::max_pool2d(&y, 2, 2)?;
                }
                if let Some(t) = transition {
                    let y = t.conv.forward(&ops::relu(&t.norm.forward(&x, mode)?))?;
                    x = ops::avg_pool2d(&y, 2, 2)?;
                }
                for layer in layers {
                    let new = layer.conv.forward(&ops::relu(&layer.norm.forward(&x, mode)?))?;
                    x = ops::concat_channels(&[x, new])?;
                }
                Ok(x)
            }
            Stage::Vgg { convs } => {
                let mut x = x.clone();
                for conv in convs {
                    x = ops::relu(&conv.forward(&x)?);
                }
                ops::max_pool2d(&x, 2, 2)
            }
        }
    }
}

/// A built network: parameters, block stages, attention sites and head.
#[derive(Debug)]
pub struct Model<T: Element> {
    spec: ModelSpec,
    shapes: Vec<StageShape>,
    store: ParamStore<T>,
    stages: Vec<Stage<T>>,
    attention: Vec<Option<Cbam<T>>>,
    head_weight: Tensor<T>,
    head_bias: Tensor<T>,
    mode: Cell<NormMode>,
}

impl<T: Element> Model<T> {
    /// Builds and initializes a model. The same `(spec, seed)` always yields
    /// the same parameters.
    pub fn new(spec: &ModelSpec, seed: u64) -> Result<Self> {
        let shapes = spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let mut stages = Vec::with_capacity(shapes.len());
        match &spec.backbone {
            Backbone::Dense { stem_channels, blocks } => {
                let mut c = *stem_channels;
                for (i, b) in blocks.iter().enumerate() {
                    let k = i + 1;
                    let p = format!("block{k}");
                    let stem = if k == 1 {
                        Some(Stem {
                            conv: Conv::new(
                                &mut store,
                                "block1.stem.conv",
                                (spec.input.channels, c, 3),
                                false,
                                &mut rng,
                            )?,
                            norm: Norm::new(&mut store, "block1.stem.norm", c)?,
                        })
                    } else {
                        None
                    };
                    let transition = if k > 1 && blocks[k - 2].compression.is_some() {
                        let cin = shapes[k - 2].channels;
                        Some(Transition {
                            norm: Norm::new(&mut store, &format!("{p}.transition.norm"), cin)?,
                            conv: Conv::new(&mut store, &format!("{p}.transition.conv"), (cin, c, 1), false, &mut rng)?,
                        })
                    } else {
                        None
                    };
                    let mut layers = Vec::with_capacity(b.layers);
                    for j in 1..=b.layers {
                        layers.push(DenseLayer {
                            norm: Norm::new(&mut store, &format!("{p}.layer{j}.norm"), c)?,
                            conv: Conv::new(
                                &mut store,
                                &format!("{p}.layer{j}.conv"),
                                (c, b.growth, 3),
                                false,
                                &mut rng,
                            )?,
                        });
                        c += b.growth;
                    }
                    stages.push(Stage::Dense {
                        stem,
                        transition,
                        layers,
                    });
                    if let Some(theta) = b.compression {
                        c = (c as f64 * theta).floor() as usize;
                    }
                }
            }
            Backbone::Vgg { blocks } => {
                let mut c = spec.input.channels;
                for (i, b) in blocks.iter().enumerate() {
                    let k = i + 1;
                    let mut convs = Vec::with_capacity(b.convs);
                    for j in 1..=b.convs {
                        let name = format!("block{k}.conv{j}");
                        convs.push(Conv::new(&mut store, &name, (c, b.channels, 3), true, &mut rng)?);
                        c = b.channels;
                    }
                    stages.push(Stage::Vgg { convs });
                }
            }
        }

        // A separate stream keeps backbone and head weights independent of
        // the placement set.
        let mut attn_rng = rng.clone();
        attn_rng.set_stream(1);
        let mut attention = Vec::with_capacity(shapes.len());
        for (i, s) in shapes.iter().enumerate() {
            let k = i + 1;
            attention.push(if spec.placement.contains(k) {
                Some(Cbam::new(&mut store, &format!("attn{k}"), s.channels, &spec.attention, &mut attn_rng)?)
            } else {
                None
            });
        }

        let d = shapes.last().expect("validated non-empty").channels;
        let head_weight = store.add_uniform("head.weight", &[d, spec.num_labels], d, &mut rng)?;
        let head_bias = store.add_uniform("head.bias", &[spec.num_labels], d, &mut rng)?;

        Ok(Model {
            spec: spec.clone(),
            shapes,
            store,
            stages,
            attention,
            head_weight,
            head_bias,
            mode: Cell::new(NormMode::Train),
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn num_blocks(&self) -> usize {
        self.stages.len()
    }

    pub fn stage_shapes(&self) -> &[StageShape] {
        &self.shapes
    }

    pub fn mode(&self) -> NormMode {
        self.mode.get()
    }

    pub fn set_mode(&self, mode: NormMode) {
        self.mode.set(mode);
    }

    /// Attention module at 1-based block `k`, if placed there.
    pub fn attention_at(&self, k: usize) -> Option<&Cbam<T>> {
        self.attention.get(k.wrapping_sub(1)).and_then(Option::as_ref)
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        let i = self.spec.input;
        match x.shape() {
            [_, c, h, w] if *c == i.channels && *h == i.height && *w == i.width => Ok(()),
            s => Err(Error::shape(
                "model",
                format!("input {s:?} does not match [N, {}, {}, {}]", i.channels, i.height, i.width),
            )),
        }
    }

    /// `B_k` alone, without attention.
    pub fn block(&self, k: usize, x: &Tensor<T>) -> Result<Tensor<T>> {
        let stage = k
            .checked_sub(1)
            .and_then(|i| self.stages.get(i))
            .ok_or_else(|| Error::invalid("block", format!("no block {k}")))?;
        stage.forward(x, self.mode.get())
    }

    fn run(&self, x: &Tensor<T>, mut visit: impl FnMut(usize, &Tensor<T>, Option<AttentionMaps<T>>)) -> Result<Tensor<T>> {
        self.check_input(x)?;
        let mut x = x.clone();
        for k in 1..=self.stages.len() {
            x = self.block(k, &x)?;
            let maps = match self.attention_at(k) {
                Some(a) => {
                    let (y, m) = a.apply_with_maps(&x)?;
                    x = y;
                    Some(m)
                }
                None => None,
            };
            visit(k, &x, maps);
        }
        Ok(x)
    }

    /// Outputs `x_1..x_K` of every block, attention applied where placed.
    pub fn forward_stages(&self, x: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let mut out = Vec::with_capacity(self.stages.len());
        self.run(x, |_, t, _| out.push(t.clone()))?;
        Ok(out)
    }

    /// The final feature map `x_K`.
    pub fn features(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.run(x, |_, _, _| {})
    }

    /// Logits `[N, num_labels]`.
    pub fn classify(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.head(&self.features(x)?)
    }

    /// Logits together with the attention maps of every placed block.
    pub fn classify_with_maps(&self, x: &Tensor<T>) -> Result<(Tensor<T>, Vec<(usize, AttentionMaps<T>)>)> {
        let maps = RefCell::new(Vec::new());
        let feats = self.run(x, |k, _, m| {
            if let Some(m) = m {
                maps.borrow_mut().push((k, m));
            }
        })?;
        Ok((self.head(&feats)?, maps.into_inner()))
    }

    /// Global average pool then the linear head.
    pub fn head(&self, features: &Tensor<T>) -> Result<Tensor<T>> {
        let pooled = ops::pool_global(features, PoolMode::Avg)?;
        let n = pooled.shape()[0];
        let flat = ops::reshape(&pooled, &[n, pooled.numel() / n])?;
        ops::linear(&flat, &self.head_weight, &self.head_bias)
    }
}
