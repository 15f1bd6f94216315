//! Staged feature extractor producing the pyramid maps `C1..C5`.
//!
//! A stride-2 stem gives `C1`; each stage `i` in `2..=5` opens with a stride-2
//! 3×3 convolution and continues with residual 3×3 blocks, so `C_i` has
//! stride `2^i`. Stages flagged `use_dc` run every one of their 3×3
//! convolutions as deformable convolutions.

use std::collections::BTreeMap;

use crate::deform::{dc_backward, dc_forward, DeformConvLayer, OffsetField};
use crate::error::{Error, Result};
use crate::init::{he_conv, named_rng};
use crate::params::{accumulate_conv, push_conv, push_conv_mut, ParamRef, Parameters};
use crate::tensor::{
    add, conv2d, conv2d_backward, leaky_relu, leaky_relu_backward, ConvParams, Tensor,
};

pub const STAGE_LEVELS: [u8; 4] = [2, 3, 4, 5];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StageSpec {
    pub index: u8,
    pub channels: usize,
    pub blocks: usize,
    pub use_dc: bool,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BackboneConfig {
    pub stem_channels: usize,
    pub stages: Vec<StageSpec>,
    pub export_c1: bool,
    pub clamp_offsets: bool,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self::tiny(&[4, 5]).expect("default stages are valid")
    }
}

impl BackboneConfig {
    /// Stem 16, stages 32/64/128/256 with one block each.
    pub fn tiny(dc_stages: &[u8]) -> Result<Self> {
        Self::with_widths(16, &[32, 64, 128, 256], 1, dc_stages)
    }

    pub fn with_widths(
        stem_channels: usize,
        widths: &[usize],
        blocks: usize,
        dc_stages: &[u8],
    ) -> Result<Self> {
        if widths.len() != STAGE_LEVELS.len() {
            return Err(Error::Config(format!(
                "need exactly {} stage widths, got {}",
                STAGE_LEVELS.len(),
                widths.len()
            )));
        }
        let mut cfg = Self {
            stem_channels,
            stages: STAGE_LEVELS
                .iter()
                .zip(widths)
                .map(|(&index, &channels)| StageSpec {
                    index,
                    channels,
                    blocks,
                    use_dc: false,
                })
                .collect(),
            export_c1: false,
            clamp_offsets: false,
        };
        cfg.set_dc_stages(dc_stages)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn set_dc_stages(&mut self, dc_stages: &[u8]) -> Result<()> {
        if let Some(bad) = dc_stages.iter().find(|s| !STAGE_LEVELS.contains(s)) {
            return Err(Error::Config(format!(
                "deformable stage {bad} is not one of {STAGE_LEVELS:?}"
            )));
        }
        for stage in &mut self.stages {
            stage.use_dc = dc_stages.contains(&stage.index);
        }
        Ok(())
    }

    pub fn dc_stages(&self) -> Vec<u8> {
        self.stages
            .iter()
            .filter(|s| s.use_dc)
            .map(|s| s.index)
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let indices: Vec<u8> = self.stages.iter().map(|s| s.index).collect();
        if indices != STAGE_LEVELS {
            return Err(Error::Config(format!(
                "backbone stages must be exactly {STAGE_LEVELS:?}, got {indices:?}"
            )));
        }
        if self.stem_channels == 0 {
            return Err(Error::Config("stem_channels must be positive".into()));
        }
        let mut prev = 0;
        for s in &self.stages {
            if s.channels == 0 || s.blocks == 0 {
                return Err(Error::Config(format!(
                    "stage {} needs positive channels and blocks",
                    s.index
                )));
            }
            if s.channels < prev {
                return Err(Error::Config(format!(
                    "stage {} narrows from {prev} to {} channels",
                    s.index, s.channels
                )));
            }
            prev = s.channels;
        }
        Ok(())
    }

    pub fn channels(&self, level: u8) -> Option<usize> {
        if level == 1 {
            return Some(self.stem_channels);
        }
        self.stages
            .iter()
            .find(|s| s.index == level)
            .map(|s| s.channels)
    }

    /// Offset-branch parameters added by making `stage` deformable.
    pub fn offset_params_for_stage(&self, stage: u8) -> usize {
        let Some(pos) = self.stages.iter().position(|s| s.index == stage) else {
            return 0;
        };
        let spec = &self.stages[pos];
        let in_c = if pos == 0 {
            self.stem_channels
        } else {
            self.stages[pos - 1].channels
        };
        let per = |c: usize| 18 * c * 9 + 18;
        per(in_c) + spec.blocks * per(spec.channels)
    }

    /// Input side length must be a multiple of this.
    pub const STRIDE: usize = 32;
}

#[derive(Clone, Debug, PartialEq)]
pub enum ConvUnit {
    Plain(ConvParams),
    Deform(DeformConvLayer),
}

impl ConvUnit {
    fn main(&self) -> &ConvParams {
        match self {
            ConvUnit::Plain(p) => p,
            ConvUnit::Deform(l) => &l.main,
        }
    }

    fn push<'a>(&'a self, out: &mut Vec<ParamRef<'a>>, prefix: &str, stage: u8) {
        push_conv(out, prefix, Some(stage), self.main(), false);
        if let ConvUnit::Deform(l) = self {
            push_conv(
                out,
                &format!("{prefix}.offset"),
                Some(stage),
                &l.offset_branch,
                true,
            );
        }
    }

    fn push_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor>) {
        match self {
            ConvUnit::Plain(p) => push_conv_mut(out, p),
            ConvUnit::Deform(l) => {
                push_conv_mut(out, &mut l.main);
                push_conv_mut(out, &mut l.offset_branch);
            }
        }
    }
}

#[derive(Clone, Debug)]
struct UnitCache {
    input: Tensor,
    pre: Tensor,
    offsets: Option<OffsetField>,
}

fn unit_forward(unit: &ConvUnit, input: &Tensor) -> Result<(Tensor, UnitCache)> {
    let (pre, offsets) = match unit {
        ConvUnit::Plain(p) => (conv2d(input, p)?, None),
        ConvUnit::Deform(l) => {
            let (y, off) = dc_forward(input, l)?;
            (y, Some(off))
        }
    };
    let out = leaky_relu(&pre);
    Ok((
        out,
        UnitCache {
            input: input.clone(),
            pre,
            offsets,
        },
    ))
}

/// Backward through `leaky(conv(x))`; returns `d_x` and adds parameter
/// gradients into `acc`.
fn unit_backward(
    unit: &ConvUnit,
    cache: &UnitCache,
    d_out: &Tensor,
    acc: &mut ConvUnit,
) -> Result<Tensor> {
    let d_pre = leaky_relu_backward(&cache.pre, d_out)?;
    match (unit, acc) {
        (ConvUnit::Plain(p), ConvUnit::Plain(a)) => {
            let g = conv2d_backward(&cache.input, p, &d_pre)?;
            accumulate_conv(a, &g.d_weights, &g.d_bias);
            Ok(g.d_input)
        }
        (ConvUnit::Deform(l), ConvUnit::Deform(a)) => {
            let off = cache.offsets.as_ref().expect("deformable unit caches offsets");
            let g = dc_backward(&cache.input, l, off, &d_pre)?;
            accumulate_conv(&mut a.main, &g.d_weights, &g.d_bias);
            accumulate_conv(&mut a.offset_branch, &g.d_offset_weights, &g.d_offset_bias);
            Ok(g.d_input)
        }
        _ => unreachable!("gradient accumulator layout differs from model"),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Stage {
    pub spec: StageSpec,
    pub entry: ConvUnit,
    pub blocks: Vec<ConvUnit>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Backbone {
    pub config: BackboneConfig,
    pub stem: ConvParams,
    pub stages: Vec<Stage>,
}

fn make_unit(
    seed: u64,
    name: &str,
    in_c: usize,
    out_c: usize,
    stride: usize,
    dc: bool,
    clamp: bool,
) -> ConvUnit {
    let main = he_conv(out_c, in_c, 3, stride, &mut named_rng(seed, name));
    if dc {
        let offset_branch = ConvParams::zeros(18, in_c, 3, stride, 1);
        ConvUnit::Deform(DeformConvLayer {
            main,
            offset_branch,
            clamp_offsets: clamp,
        })
    } else {
        ConvUnit::Plain(main)
    }
}

pub fn build_backbone(config: &BackboneConfig, seed: u64) -> Result<Backbone> {
    config.validate()?;
    let stem = he_conv(
        config.stem_channels,
        3,
        3,
        2,
        &mut named_rng(seed, "backbone.stem"),
    );
    let mut in_c = config.stem_channels;
    let mut stages = Vec::with_capacity(config.stages.len());
    for spec in &config.stages {
        let prefix = format!("backbone.stage{}", spec.index);
        let entry = make_unit(
            seed,
            &format!("{prefix}.entry"),
            in_c,
            spec.channels,
            2,
            spec.use_dc,
            config.clamp_offsets,
        );
        let blocks = (0..spec.blocks)
            .map(|j| {
                make_unit(
                    seed,
                    &format!("{prefix}.block{j}"),
                    spec.channels,
                    spec.channels,
                    1,
                    spec.use_dc,
                    config.clamp_offsets,
                )
            })
            .collect();
        stages.push(Stage {
            spec: spec.clone(),
            entry,
            blocks,
        });
        in_c = spec.channels;
    }
    Ok(Backbone {
        config: config.clone(),
        stem,
        stages,
    })
}

impl Parameters for Backbone {
    fn params<'a>(&'a self, out: &mut Vec<ParamRef<'a>>) {
        push_conv(out, "backbone.stem", Some(1), &self.stem, false);
        for stage in &self.stages {
            let i = stage.spec.index;
            stage
                .entry
                .push(out, &format!("backbone.stage{i}.entry"), i);
            for (j, b) in stage.blocks.iter().enumerate() {
                b.push(out, &format!("backbone.stage{i}.block{j}"), i);
            }
        }
    }

    fn params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor>) {
        push_conv_mut(out, &mut self.stem);
        for stage in &mut self.stages {
            stage.entry.push_mut(out);
            for b in &mut stage.blocks {
                b.push_mut(out);
            }
        }
    }
}

#[derive(Clone, Debug)]
struct StageCache {
    entry: UnitCache,
    blocks: Vec<UnitCache>,
}

#[derive(Clone, Debug)]
pub struct BackboneCache {
    stem_input: Tensor,
    stem_pre: Tensor,
    stages: Vec<StageCache>,
}

impl BackboneCache {
    /// Every pre-activation, in forward order.
    pub fn pre_activations(&self) -> Vec<&Tensor> {
        let mut v = vec![&self.stem_pre];
        for s in &self.stages {
            v.push(&s.entry.pre);
            v.extend(s.blocks.iter().map(|b| &b.pre));
        }
        v
    }

    /// Offset fields of every deformable unit, in forward order.
    pub fn offset_fields(&self) -> Vec<&OffsetField> {
        self.stages
            .iter()
            .flat_map(|s| std::iter::once(&s.entry).chain(&s.blocks))
            .filter_map(|u| u.offsets.as_ref())
            .collect()
    }
}

pub type FeatureMaps = BTreeMap<u8, Tensor>;

impl Backbone {
    pub fn check_input(&self, image: &Tensor) -> Result<()> {
        let (_, c, h, w) = image.dims4()?;
        if c != 3 {
            return Err(Error::shape(
                "backbone_forward",
                format!("expected 3 input channels, got {c}"),
            ));
        }
        if h % BackboneConfig::STRIDE != 0 || w % BackboneConfig::STRIDE != 0 {
            return Err(Error::shape(
                "backbone_forward",
                format!(
                    "input {h}x{w} is not divisible by {}",
                    BackboneConfig::STRIDE
                ),
            ));
        }
        Ok(())
    }

    pub fn forward_cached(&self, image: &Tensor) -> Result<(FeatureMaps, BackboneCache)> {
        self.check_input(image)?;
        let stem_pre = conv2d(image, &self.stem)?;
        let mut x = leaky_relu(&stem_pre);
        let mut maps = FeatureMaps::new();
        if self.config.export_c1 {
            maps.insert(1, x.clone());
        }
        let mut stage_caches = Vec::with_capacity(self.stages.len());
        for stage in &self.stages {
            let (y, entry) = unit_forward(&stage.entry, &x)?;
            x = y;
            let mut blocks = Vec::with_capacity(stage.blocks.len());
            for b in &stage.blocks {
                let (y, c) = unit_forward(b, &x)?;
                x = add(&x, &y)?;
                blocks.push(c);
            }
            maps.insert(stage.spec.index, x.clone());
            stage_caches.push(StageCache { entry, blocks });
        }
        Ok((
            maps,
            BackboneCache {
                stem_input: image.clone(),
                stem_pre,
                stages: stage_caches,
            },
        ))
    }

    /// Propagates gradients w.r.t. the exported maps back to the image,
    /// adding parameter gradients into `acc`.
    pub fn backward(
        &self,
        cache: &BackboneCache,
        d_maps: &FeatureMaps,
        acc: &mut Backbone,
    ) -> Result<Tensor> {
        let mut carry: Option<Tensor> = None;
        for (si, stage) in self.stages.iter().enumerate().rev() {
            let sc = &cache.stages[si];
            let mut d = match (carry.take(), d_maps.get(&stage.spec.index)) {
                (Some(c), Some(m)) => add(&c, m)?,
                (Some(c), None) => c,
                (None, Some(m)) => m.clone(),
                (None, None) => {
                    let last = sc.blocks.last().map_or(&sc.entry.pre, |b| &b.pre);
                    last.zeros_like()
                }
            };
            for (bj, b) in stage.blocks.iter().enumerate().rev() {
                let through = unit_backward(b, &sc.blocks[bj], &d, &mut acc.stages[si].blocks[bj])?;
                d = add(&d, &through)?;
            }
            carry = Some(unit_backward(
                &stage.entry,
                &sc.entry,
                &d,
                &mut acc.stages[si].entry,
            )?);
        }
        let mut d = carry.expect("backbone has stages");
        if let Some(m) = d_maps.get(&1) {
            d = add(&d, m)?;
        }
        let d_pre = leaky_relu_backward(&cache.stem_pre, &d)?;
        let g = conv2d_backward(&cache.stem_input, &self.stem, &d_pre)?;
        accumulate_conv(&mut acc.stem, &g.d_weights, &g.d_bias);
        Ok(g.d_input)
    }
}

pub fn backbone_forward(bb: &Backbone, image: &Tensor) -> Result<FeatureMaps> {
    Ok(bb.forward_cached(image)?.0)
}
