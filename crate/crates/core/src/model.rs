//! The attentional feedback network: layer table, parameters and forward pass.

use std::path::PathBuf;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Eager, EagerVar, Graph};
use crate::raster::{NormalizedSample, AERIAL_MEAN, AERIAL_STD};
use crate::tensor::{FeatureMap, Scalar};

/// Ablation variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub enum Variant {
    #[default]
    #[serde(rename = "afn")]
    Afn,
    /// Attention and gating replaced by concatenation and a 1x1 conv.
    #[serde(rename = "no-afm")]
    NoAfm,
    /// Masks computed once from the shallow features, reused at every step.
    #[serde(rename = "afn0")]
    AfnStatic,
    /// Attention hidden layers narrowed to 64 channels.
    #[serde(rename = "afn64")]
    Afn64,
    /// Aerial input replaced by a uniform gray prior.
    #[serde(rename = "afnd")]
    AfnD,
}

impl Variant {
    pub const ALL: [Variant; 5] = [Variant::Afn, Variant::NoAfm, Variant::AfnStatic, Variant::Afn64, Variant::AfnD];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Afn => "afn",
            Variant::NoAfm => "no-afm",
            Variant::AfnStatic => "afn0",
            Variant::Afn64 => "afn64",
            Variant::AfnD => "afnd",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| {
                let names: Vec<_> = Variant::ALL.iter().map(|v| v.name()).collect();
                Error::Config(format!("unknown variant {s:?}, expected one of {}", names.join(", ")))
            })
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Base channel count `m`.
    pub base_channels: usize,
    /// Feedback steps `T`.
    pub steps: usize,
    /// Residual units `N`, even.
    pub residual_units: usize,
    pub attention_widths: [usize; 4],
    pub variant: Variant,
    /// Keep training the RGB branch after loading pretrained weights.
    pub finetune_rgb: bool,
    /// Width of the two RGB-branch conv layers.
    pub rgb_width: usize,
    /// Checkpoint holding `rgb.*` tensors to start the RGB branch from.
    pub rgb_pretrained: Option<PathBuf>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::with_base(64, 4, 16)
    }
}

impl ModelConfig {
    /// Default widths for the given `m`, `T`, `N`.
    pub fn with_base(m: usize, steps: usize, residual_units: usize) -> Self {
        Self {
            base_channels: m,
            steps,
            residual_units,
            attention_widths: [4 * m, 4 * m, 8 * m, 2 * m],
            variant: Variant::Afn,
            finetune_rgb: false,
            rgb_width: 64,
            rgb_pretrained: None,
        }
    }

    /// Small network used by tests and desk-scale runs.
    pub fn tiny() -> Self {
        Self {
            rgb_width: 16,
            ..Self::with_base(8, 2, 4)
        }
    }

    pub fn with_variant(mut self, variant: Variant) -> Self {
        self.variant = variant;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.base_channels;
        if m == 0 {
            return Err(Error::Config("base_channels must be at least 1".into()));
        }
        if self.steps == 0 {
            return Err(Error::Config("steps must be at least 1".into()));
        }
        if self.residual_units == 0 || self.residual_units % 2 != 0 {
            return Err(Error::Config(format!(
                "residual_units must be even and positive, got {}",
                self.residual_units
            )));
        }
        if self.attention_widths[3] != 2 * m {
            return Err(Error::Config(format!(
                "last attention width must be 2m = {}, got {}",
                2 * m,
                self.attention_widths[3]
            )));
        }
        if self.attention_widths.contains(&0) || self.rgb_width == 0 {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        if self.finetune_rgb && self.rgb_pretrained.is_none() {
            return Err(Error::Resource("finetune_rgb needs rgb_pretrained weights".into()));
        }
        Ok(())
    }

    /// Attention widths after applying the variant.
    pub fn effective_attention_widths(&self) -> [usize; 4] {
        match self.variant {
            Variant::Afn64 => [64, 64, 64, 2 * self.base_channels],
            _ => self.attention_widths,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Act {
    /// Per-channel PReLU; holds the slope parameter index.
    PRelu(usize),
    Relu,
    Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvLayer {
    pub weight: usize,
    pub bias: usize,
    pub act: Act,
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Kaiming { fan_in: usize },
    Const(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: [usize; 3],
    pub init: Init,
    pub rgb_branch: bool,
}

impl ParamSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Parameter indices for every layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Layout {
    pub dem: [ConvLayer; 2],
    pub rgb: [ConvLayer; 2],
    pub rgb_adapter: Option<ConvLayer>,
    pub compress: ConvLayer,
    /// `(1x1, 3x3)` pair per residual unit.
    pub units: Vec<[ConvLayer; 2]>,
    pub ru_out: ConvLayer,
    pub attention: Option<[ConvLayer; 4]>,
    pub gamma: Option<usize>,
    /// Concatenation fuse for the no-attention variant.
    pub fuse: Option<ConvLayer>,
    pub recon: [ConvLayer; 2],
}

/// Earlier units whose outputs feed unit `i` (1-based), ascending. Empty for B1.
pub fn unit_sources(i: usize) -> Vec<usize> {
    let mut v: Vec<usize> = (1..i).rev().step_by(2).collect();
    v.reverse();
    v
}

struct Builder {
    specs: Vec<ParamSpec>,
}

impl Builder {
    fn push(&mut self, name: String, shape: [usize; 3], init: Init, rgb_branch: bool) -> usize {
        self.specs.push(ParamSpec {
            name,
            shape,
            init,
            rgb_branch,
        });
        self.specs.len() - 1
    }

    fn conv(&mut self, name: &str, cin: usize, cout: usize, kernel: usize, act: ActKind) -> ConvLayer {
        let rgb = name.starts_with("rgb.");
        let weight = self.push(
            format!("{name}.weight"),
            [cout, cin, kernel * kernel],
            Init::Kaiming { fan_in: cin * kernel * kernel },
            rgb,
        );
        let bias = self.push(format!("{name}.bias"), [cout, 1, 1], Init::Const(0.0), rgb);
        let act = match act {
            ActKind::PRelu => Act::PRelu(self.push(format!("{name}.prelu"), [cout, 1, 1], Init::Const(0.25), rgb)),
            ActKind::Relu => Act::Relu,
            ActKind::Linear => Act::Linear,
        };
        ConvLayer {
            weight,
            bias,
            act,
            cin,
            cout,
            kernel,
        }
    }
}

#[derive(Clone, Copy)]
enum ActKind {
    PRelu,
    Relu,
    Linear,
}

impl Layout {
    pub fn build(cfg: &ModelConfig) -> Result<(Layout, Vec<ParamSpec>)> {
        cfg.validate()?;
        let m = cfg.base_channels;
        let mut b = Builder { specs: Vec::new() };
        use ActKind::*;

        let dem = [b.conv("dem.conv1", 1, 4 * m, 3, PRelu), b.conv("dem.conv2", 4 * m, m, 3, PRelu)];
        let rw = cfg.rgb_width;
        let rgb = [b.conv("rgb.conv1", 3, rw, 3, Relu), b.conv("rgb.conv2", rw, rw, 3, Relu)];
        let rgb_adapter = (rw != m).then(|| b.conv("rgb_adapter", rw, m, 1, PRelu));

        let compress = b.conv("afm.compress", 2 * m, m, 1, PRelu);
        let mut units = Vec::with_capacity(cfg.residual_units);
        for i in 1..=cfg.residual_units {
            let cin = m * unit_sources(i).len().max(1);
            units.push([
                b.conv(&format!("afm.unit{i}.conv1"), cin, m, 1, PRelu),
                b.conv(&format!("afm.unit{i}.conv3"), m, m, 3, PRelu),
            ]);
        }
        let ru_out = b.conv("afm.ru_out", m * cfg.residual_units / 2, m, 1, PRelu);

        let (attention, gamma, fuse) = if cfg.variant == Variant::NoAfm {
            (None, None, Some(b.conv("afm.fuse", 2 * m, m, 1, PRelu)))
        } else {
            let w = cfg.effective_attention_widths();
            let a = [
                b.conv("afm.attn1", 2 * m, w[0], 3, PRelu),
                b.conv("afm.attn2", w[0], w[1], 3, PRelu),
                b.conv("afm.attn3", w[1], w[2], 3, PRelu),
                b.conv("afm.attn4", w[2], w[3], 3, Linear),
            ];
            let g = b.push("afm.gamma".into(), [1, 1, 1], Init::Const(0.0), false);
            (Some(a), Some(g), None)
        };

        let recon = [b.conv("recon.conv1", m, m, 3, PRelu), b.conv("recon.conv2", m, 1, 3, Linear)];
        let layout = Layout {
            dem,
            rgb,
            rgb_adapter,
            compress,
            units,
            ru_out,
            attention,
            gamma,
            fuse,
            recon,
        };
        Ok((layout, b.specs))
    }
}

/// Number of scalar parameters; shared across feedback steps, so independent of `T`.
pub fn param_count(cfg: &ModelConfig) -> Result<usize> {
    Ok(Layout::build(cfg)?.1.iter().map(ParamSpec::len).sum())
}

/// Output of a full forward pass.
#[derive(Debug, Clone)]
pub struct AfnOutput<S> {
    pub sr_steps: Vec<FeatureMap<S>>,
    pub residual_steps: Vec<FeatureMap<S>>,
    /// `(Attn_DEM, Attn_RGB)` per step, absent for the no-attention variant.
    pub attention_masks: Option<Vec<(FeatureMap<S>, FeatureMap<S>)>>,
}

impl<S: Scalar> AfnOutput<S> {
    pub fn final_sr(&self) -> &FeatureMap<S> {
        self.sr_steps.last().expect("at least one step")
    }
}

/// Graph handles produced by [`Afn::trace`].
pub struct Trace<V> {
    pub sr: Vec<V>,
    pub residual: Vec<V>,
    pub masks: Vec<(V, V)>,
}

/// Parameters plus the config and layer table that give them meaning.
#[derive(Debug, Clone, PartialEq)]
pub struct Afn<S> {
    config: ModelConfig,
    layout: Layout,
    specs: Vec<ParamSpec>,
    params: Vec<FeatureMap<S>>,
    trainable: Vec<bool>,
}

impl<S: Scalar> Afn<S> {
    /// Kaiming fan-in normal kernels, zero biases, PReLU slopes 0.25, gamma 0.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        let (layout, specs) = Layout::build(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = specs
            .iter()
            .map(|s| {
                let [c, h, w] = s.shape;
                match s.init {
                    Init::Const(v) => FeatureMap::full(c, h, w, S::of(v)),
                    Init::Kaiming { fan_in } => {
                        let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
                        FeatureMap::from_fn(c, h, w, |_, _, _| S::of(normal.sample(&mut rng)))
                    }
                }
            })
            .collect();
        let mut model = Self::assemble(config.clone(), layout, specs, params)?;
        if let Some(path) = &config.rgb_pretrained {
            if !path.exists() {
                return Err(Error::Resource(format!(
                    "pretrained RGB weights not found at {}",
                    path.display()
                )));
            }
            let donor = crate::checkpoint::Checkpoint::load(path)?;
            model.load_rgb_branch(&donor.model)?;
        }
        Ok(model)
    }

    /// Rebuilds a model from named tensors, e.g. a checkpoint.
    pub fn from_named(config: &ModelConfig, named: Vec<(String, FeatureMap<S>)>) -> Result<Self> {
        let (layout, specs) = Layout::build(config)?;
        if named.len() != specs.len() {
            return Err(Error::Format(format!(
                "expected {} parameter tensors, found {}",
                specs.len(),
                named.len()
            )));
        }
        let mut params = Vec::with_capacity(specs.len());
        for (spec, (name, t)) in specs.iter().zip(named) {
            if spec.name != name || spec.shape != t.shape() {
                return Err(Error::Format(format!(
                    "tensor {name} {:?} does not match layer {} {:?}",
                    t.shape(),
                    spec.name,
                    spec.shape
                )));
            }
            params.push(t);
        }
        Self::assemble(config.clone(), layout, specs, params)
    }

    fn assemble(config: ModelConfig, layout: Layout, specs: Vec<ParamSpec>, params: Vec<FeatureMap<S>>) -> Result<Self> {
        let frozen_rgb = config.rgb_pretrained.is_some() && !config.finetune_rgb;
        let trainable = specs.iter().map(|s| !(s.rgb_branch && frozen_rgb)).collect();
        Ok(Self {
            config,
            layout,
            specs,
            params,
            trainable,
        })
    }

    fn load_rgb_branch(&mut self, donor: &Afn<f32>) -> Result<()> {
        for (i, spec) in self.specs.iter().enumerate() {
            if !spec.rgb_branch {
                continue;
            }
            let t = donor
                .param_by_name(&spec.name)
                .ok_or_else(|| Error::Resource(format!("pretrained weights lack {}", spec.name)))?;
            if t.shape() != spec.shape {
                return Err(Error::Resource(format!(
                    "pretrained {} has shape {:?}, expected {:?}",
                    spec.name,
                    t.shape(),
                    spec.shape
                )));
            }
            self.params[i] = t.cast();
        }
        Ok(())
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn params(&self) -> &[FeatureMap<S>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [FeatureMap<S>] {
        &mut self.params
    }

    pub fn trainable(&self) -> &[bool] {
        &self.trainable
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(FeatureMap::len).sum()
    }

    pub fn param_by_name(&self, name: &str) -> Option<&FeatureMap<S>> {
        self.specs.iter().position(|s| s.name == name).map(|i| &self.params[i])
    }

    pub fn param_by_name_mut(&mut self, name: &str) -> Option<&mut FeatureMap<S>> {
        self.specs.iter().position(|s| s.name == name).map(|i| &mut self.params[i])
    }

    pub fn named(&self) -> impl Iterator<Item = (&str, &FeatureMap<S>)> {
        self.specs.iter().map(|s| s.name.as_str()).zip(&self.params)
    }

    /// The fusion gate, or `None` for the no-attention variant.
    pub fn gamma(&self) -> Option<S> {
        self.layout.gamma.map(|i| self.params[i].data()[0])
    }

    pub fn cast<T: Scalar>(&self) -> Afn<T> {
        Afn {
            config: self.config.clone(),
            layout: self.layout.clone(),
            specs: self.specs.clone(),
            params: self.params.iter().map(FeatureMap::cast).collect(),
            trainable: self.trainable.clone(),
        }
    }

    fn check_inputs(&self, dem_ilr: &FeatureMap<S>, aerial: &FeatureMap<S>) -> Result<()> {
        let [c, h, w] = dem_ilr.shape();
        if c != 1 {
            return Err(Error::Shape(format!("DEM input needs 1 channel, got {c}")));
        }
        if h < 8 || w < 8 {
            return Err(Error::TooSmall(format!("DEM patch {h}x{w} is below 8x8")));
        }
        if aerial.shape() != [3, 2 * h, 2 * w] {
            return Err(Error::Shape(format!(
                "aerial {:?} does not pair with DEM {h}x{w}",
                aerial.shape()
            )));
        }
        if !dem_ilr.all_finite() || !aerial.all_finite() {
            return Err(Error::Numeric("non-finite network input".into()));
        }
        Ok(())
    }

    /// Records the whole forward pass on `g`.
    pub fn trace<G: Graph<S>>(&self, g: &mut G, dem_ilr: &G::Var, aerial: &G::Var, keep_masks: bool) -> Trace<G::Var> {
        let l = &self.layout;
        let f_dem = dem_features(g, l, dem_ilr);
        let aerial = if self.config.variant == Variant::AfnD {
            let [_, h, w] = g.value(aerial).shape();
            g.constant(uniform_prior(h, w))
        } else {
            aerial.clone()
        };
        let f_rgb = rgb_features(g, l, &aerial);
        let static_masks = (self.config.variant == Variant::AfnStatic).then(|| attention_masks(g, l, &f_dem, &f_rgb));

        let mut out = Trace {
            sr: Vec::new(),
            residual: Vec::new(),
            masks: Vec::new(),
        };
        let mut feedback = f_dem.clone();
        for _ in 0..self.config.steps {
            let f_ru = residual_stack(g, l, &f_dem, &feedback);
            let fused = match (&l.fuse, &static_masks) {
                (Some(fuse), _) => {
                    let cat = g.concat(&[&f_ru, &f_rgb]);
                    apply(g, fuse, &cat)
                }
                (None, masks) => {
                    let (a_dem, a_rgb) = match masks {
                        Some(m) => m.clone(),
                        None => attention_masks(g, l, &f_ru, &f_rgb),
                    };
                    let gamma = g.param(l.gamma.expect("attention variants carry gamma"));
                    let fused = fuse(g, &f_ru, &f_rgb, &a_dem, &a_rgb, &gamma);
                    if keep_masks {
                        out.masks.push((a_dem, a_rgb));
                    }
                    fused
                }
            };
            let res = reconstruct(g, l, &fused);
            out.sr.push(g.add(&res, dem_ilr));
            out.residual.push(res);
            feedback = fused;
        }
        out
    }

    /// Full forward pass with every intermediate step and mask.
    pub fn forward(&self, dem_ilr: &FeatureMap<S>, aerial: &FeatureMap<S>) -> Result<AfnOutput<S>> {
        self.check_inputs(dem_ilr, aerial)?;
        let mut g = Eager::new(&self.params);
        let d = g.constant(dem_ilr.clone());
        let a = g.constant(aerial.clone());
        let t = self.trace(&mut g, &d, &a, true);
        let val = |v| g.value(v).clone();
        Ok(AfnOutput {
            sr_steps: t.sr.iter().map(val).collect(),
            residual_steps: t.residual.iter().map(val).collect(),
            attention_masks: (self.layout.fuse.is_none())
                .then(|| t.masks.iter().map(|(a, b)| (val(a), val(b))).collect()),
        })
    }

    /// `SR^T` only, releasing intermediates as it goes.
    pub fn predict(&self, dem_ilr: &FeatureMap<S>, aerial: &FeatureMap<S>) -> Result<FeatureMap<S>> {
        self.check_inputs(dem_ilr, aerial)?;
        let mut g = Eager::new(&self.params);
        let d = g.constant(dem_ilr.clone());
        let a = g.constant(aerial.clone());
        let mut t = self.trace(&mut g, &d, &a, false);
        let last = t.sr.pop().expect("at least one step");
        Ok(g.value(&last).clone())
    }

    /// `I_res^T`, the final step's residual over the DEM input.
    pub fn predict_residual(&self, dem_ilr: &FeatureMap<S>, aerial: &FeatureMap<S>) -> Result<FeatureMap<S>> {
        self.check_inputs(dem_ilr, aerial)?;
        let mut g = Eager::new(&self.params);
        let d = g.constant(dem_ilr.clone());
        let a = g.constant(aerial.clone());
        let mut t = self.trace(&mut g, &d, &a, false);
        let last = t.residual.pop().expect("at least one step");
        Ok(g.value(&last).clone())
    }

    pub fn feature_extract_dem(&self, dem_ilr: &FeatureMap<S>) -> Result<FeatureMap<S>> {
        if dem_ilr.channels() != 1 {
            return Err(Error::Shape(format!("DEM input needs 1 channel, got {}", dem_ilr.channels())));
        }
        if !dem_ilr.all_finite() {
            return Err(Error::Numeric("non-finite DEM input".into()));
        }
        self.eager1(dem_ilr, |g, l, x| dem_features(g, l, x))
    }

    pub fn feature_extract_rgb(&self, aerial: &FeatureMap<S>) -> Result<FeatureMap<S>> {
        let [c, h, w] = aerial.shape();
        if c != 3 || h % 2 != 0 || w % 2 != 0 {
            return Err(Error::Shape(format!("aerial must be 3 x even x even, got {:?}", aerial.shape())));
        }
        self.eager1(aerial, |g, l, x| rgb_features(g, l, x))
    }

    pub fn residual_stack(&self, f_dem: &FeatureMap<S>, feedback: &FeatureMap<S>) -> Result<FeatureMap<S>> {
        self.check_features(&[f_dem, feedback])?;
        self.eager2(f_dem, feedback, |g, l, a, b| residual_stack(g, l, a, b))
    }

    pub fn attention(&self, f_ru: &FeatureMap<S>, f_rgb: &FeatureMap<S>) -> Result<(FeatureMap<S>, FeatureMap<S>)> {
        self.check_features(&[f_ru, f_rgb])?;
        if self.layout.attention.is_none() {
            return Err(Error::Config("the no-afm variant has no attention module".into()));
        }
        let mut g = Eager::new(&self.params);
        let (a, b) = (g.constant(f_ru.clone()), g.constant(f_rgb.clone()));
        let (x, y) = attention_masks(&mut g, &self.layout, &a, &b);
        Ok((g.value(&x).clone(), g.value(&y).clone()))
    }

    pub fn reconstruct(&self, fused: &FeatureMap<S>) -> Result<FeatureMap<S>> {
        self.check_features(&[fused])?;
        self.eager1(fused, |g, l, x| reconstruct(g, l, x))
    }

    fn check_features(&self, maps: &[&FeatureMap<S>]) -> Result<()> {
        let m = self.config.base_channels;
        let shape = maps[0].shape();
        for f in maps {
            if f.channels() != m || f.shape() != shape {
                return Err(Error::Shape(format!(
                    "feature maps must all be {m} x {} x {}, got {:?}",
                    shape[1],
                    shape[2],
                    f.shape()
                )));
            }
        }
        Ok(())
    }

    fn eager1(
        &self,
        x: &FeatureMap<S>,
        f: impl FnOnce(&mut Eager<'_, S>, &Layout, &EagerVar<S>) -> EagerVar<S>,
    ) -> Result<FeatureMap<S>> {
        let mut g = Eager::new(&self.params);
        let v = g.constant(x.clone());
        let y = f(&mut g, &self.layout, &v);
        Ok(g.value(&y).clone())
    }

    fn eager2(
        &self,
        a: &FeatureMap<S>,
        b: &FeatureMap<S>,
        f: impl FnOnce(
            &mut Eager<'_, S>,
            &Layout,
            &EagerVar<S>,
            &EagerVar<S>,
        ) -> EagerVar<S>,
    ) -> Result<FeatureMap<S>> {
        let mut g = Eager::new(&self.params);
        let (va, vb) = (g.constant(a.clone()), g.constant(b.clone()));
        let y = f(&mut g, &self.layout, &va, &vb);
        Ok(g.value(&y).clone())
    }
}

/// `F_RU * Attn_DEM + gamma * F_RGB * Attn_RGB`, element-wise.
pub fn fuse_features<S: Scalar>(
    f_ru: &FeatureMap<S>,
    f_rgb: &FeatureMap<S>,
    attn_dem: &FeatureMap<S>,
    attn_rgb: &FeatureMap<S>,
    gamma: S,
) -> Result<FeatureMap<S>> {
    let shape = f_ru.shape();
    if [f_rgb, attn_dem, attn_rgb].iter().any(|f| f.shape() != shape) {
        return Err(Error::Shape("fusion inputs must share one shape".into()));
    }
    let params = [FeatureMap::full(1, 1, 1, gamma)];
    let mut g = Eager::new(&params);
    let vars: Vec<_> = [f_ru, f_rgb, attn_dem, attn_rgb]
        .iter()
        .map(|f| g.constant((*f).clone()))
        .collect();
    let gv = g.param(0);
    let y = fuse(&mut g, &vars[0], &vars[1], &vars[2], &vars[3], &gv);
    Ok(g.value(&y).clone())
}

/// Network inputs for a normalized patch: `1 x H x W` heights and `3 x 2H x 2W` aerial.
pub fn sample_inputs<S: Scalar>(s: &NormalizedSample) -> (FeatureMap<S>, FeatureMap<S>) {
    let dem = FeatureMap::from_f64(1, s.rows, s.cols, &s.dem_ilr).expect("sample dims");
    let aerial = FeatureMap::from_f64(3, 2 * s.rows, 2 * s.cols, &s.aerial).expect("sample dims");
    (dem, aerial)
}

/// Standardized mid-gray image used in place of the aerial input.
pub fn uniform_prior<S: Scalar>(rows: usize, cols: usize) -> FeatureMap<S> {
    FeatureMap::from_fn(3, rows, cols, |c, _, _| S::of((0.5 - AERIAL_MEAN[c]) / AERIAL_STD[c]))
}

fn apply<S: Scalar, G: Graph<S>>(g: &mut G, l: &ConvLayer, x: &G::Var) -> G::Var {
    let w = g.param(l.weight);
    let b = g.param(l.bias);
    let y = g.conv(x, &w, &b);
    match l.act {
        Act::PRelu(s) => {
            let a = g.param(s);
            g.prelu(&y, &a)
        }
        Act::Relu => g.relu(&y),
        Act::Linear => y,
    }
}

fn dem_features<S: Scalar, G: Graph<S>>(g: &mut G, l: &Layout, x: &G::Var) -> G::Var {
    let h = apply(g, &l.dem[0], x);
    apply(g, &l.dem[1], &h)
}

fn rgb_features<S: Scalar, G: Graph<S>>(g: &mut G, l: &Layout, x: &G::Var) -> G::Var {
    let h = apply(g, &l.rgb[0], x);
    let h = apply(g, &l.rgb[1], &h);
    let p = g.maxpool2(&h);
    match &l.rgb_adapter {
        Some(a) => apply(g, a, &p),
        None => p,
    }
}

fn residual_stack<S: Scalar, G: Graph<S>>(g: &mut G, l: &Layout, f_dem: &G::Var, feedback: &G::Var) -> G::Var {
    let cat = g.concat(&[f_dem, feedback]);
    let x0 = apply(g, &l.compress, &cat);
    let mut outs: Vec<G::Var> = Vec::with_capacity(l.units.len());
    for (k, unit) in l.units.iter().enumerate() {
        let i = k + 1;
        let src = unit_sources(i);
        let input = match src.len() {
            0 => x0.clone(),
            1 => outs[src[0] - 1].clone(),
            _ => {
                let refs: Vec<&G::Var> = src.iter().map(|&j| &outs[j - 1]).collect();
                g.concat(&refs)
            }
        };
        let h = apply(g, &unit[0], &input);
        outs.push(apply(g, &unit[1], &h));
    }
    let evens: Vec<&G::Var> = outs.iter().skip(1).step_by(2).collect();
    let cat = if evens.len() == 1 { evens[0].clone() } else { g.concat(&evens) };
    apply(g, &l.ru_out, &cat)
}

fn attention_masks<S: Scalar, G: Graph<S>>(g: &mut G, l: &Layout, f_ru: &G::Var, f_rgb: &G::Var) -> (G::Var, G::Var) {
    let layers = l.attention.as_ref().expect("attention layers");
    let mut h = g.concat(&[f_ru, f_rgb]);
    for layer in layers {
        h = apply(g, layer, &h);
    }
    let s = g.sigmoid(&h);
    let m = layers[3].cout / 2;
    (g.slice_channels(&s, 0, m), g.slice_channels(&s, m, m))
}

fn fuse<S: Scalar, G: Graph<S>>(
    g: &mut G,
    f_ru: &G::Var,
    f_rgb: &G::Var,
    a_dem: &G::Var,
    a_rgb: &G::Var,
    gamma: &G::Var,
) -> G::Var {
    let d = g.mul(f_ru, a_dem);
    let r = g.mul(f_rgb, a_rgb);
    let r = g.scale(&r, gamma);
    g.add(&d, &r)
}

fn reconstruct<S: Scalar, G: Graph<S>>(g: &mut G, l: &Layout, x: &G::Var) -> G::Var {
    let h = apply(g, &l.recon[0], x);
    apply(g, &l.recon[1], &h)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn skip_table() {
        assert_eq!(unit_sources(1), Vec::<usize>::new());
        assert_eq!(unit_sources(2), vec![1]);
        assert_eq!(unit_sources(4), vec![1, 3]);
        assert_eq!(unit_sources(7), vec![2, 4, 6]);
    }

    #[test]
    fn config_validation() {
        let mut c = ModelConfig::tiny();
        c.residual_units = 3;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c = ModelConfig::tiny();
        c.steps = 0;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::tiny();
        c.attention_widths[3] = 5;
        assert!(c.validate().is_err());
        assert!(ModelConfig::default().validate().is_ok());
    }

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
            assert_eq!(serde_json::to_string(&v).unwrap(), format!("\"{}\"", v.name()));
        }
        assert!("afn9".parse::<Variant>().is_err());
    }

    #[test]
    fn shapes_through_forward() {
        let model = Afn::<f32>::init(&ModelConfig::tiny(), 3).unwrap();
        let dem = FeatureMap::from_fn(1, 12, 10, |_, y, x| (y as f32 - x as f32) * 0.1);
        let aerial = FeatureMap::from_fn(3, 24, 20, |c, y, x| ((c + y * x) % 7) as f32 * 0.2);
        let out = model.forward(&dem, &aerial).unwrap();
        assert_eq!(out.sr_steps.len(), 2);
        assert_eq!(out.final_sr().shape(), [1, 12, 10]);
        assert_eq!(out.attention_masks.as_ref().unwrap()[0].0.shape(), [8, 12, 10]);
        assert_eq!(model.predict(&dem, &aerial).unwrap(), *out.final_sr());
        let bad = FeatureMap::zeros(3, 24, 22);
        assert!(matches!(model.forward(&dem, &bad), Err(Error::Shape(_))));
    }

    #[test]
    fn every_variant_runs() {
        for v in Variant::ALL {
            let model = Afn::<f32>::init(&ModelConfig::tiny().with_variant(v), 1).unwrap();
            let dem = FeatureMap::full(1, 8, 8, 0.5);
            let aerial = FeatureMap::full(3, 16, 16, 0.1);
            let out = model.forward(&dem, &aerial).unwrap();
            assert!(out.final_sr().all_finite(), "{v}");
            assert_eq!(out.attention_masks.is_none(), v == Variant::NoAfm);
            assert_eq!(model.gamma().is_none(), v == Variant::NoAfm);
        }
    }

    #[test]
    fn missing_pretrained_is_resource_error() {
        let mut c = ModelConfig::tiny();
        c.rgb_pretrained = Some("/nonexistent/rgb.afnckpt".into());
        c.finetune_rgb = true;
        assert!(matches!(Afn::<f32>::init(&c, 0), Err(Error::Resource(_))));
        let mut c = ModelConfig::tiny();
        c.finetune_rgb = true;
        assert!(matches!(Afn::<f32>::init(&c, 0), Err(Error::Resource(_))));
    }
}
